import numpy as np
import pytest

from hmge.errors import ConfigError
from hmge.sbm import (
    PER_DIM_LABELS_FILE,
    SbmConfig,
    expected_edge_counts,
    generate_dimension,
    generate_multiplex,
    save_dataset,
)


class TestConfig:
    def test_defaults_match_reference_settings(self):
        cfg = SbmConfig(num_nodes=10, num_dims=2)
        assert cfg.num_classes == 2
        assert cfg.class_probs == (0.5, 0.5)
        assert cfg.p_in == 0.05 and cfg.p_out == 0.01

    def test_probability_validation(self):
        with pytest.raises(ConfigError):
            SbmConfig(num_nodes=10, num_dims=1, p_in=0.01, p_out=0.05)
        with pytest.raises(ConfigError):
            SbmConfig(num_nodes=10, num_dims=1, class_probs=(0.7, 0.7))
        with pytest.raises(ConfigError):
            SbmConfig(num_nodes=0, num_dims=1)


class TestGenerateDimension:
    def test_zero_probabilities_edgeless(self):
        cfg = SbmConfig(num_nodes=30, num_dims=1, p_in=0.0, p_out=0.0)
        adj, labels = generate_dimension(cfg, np.random.default_rng(0))
        assert adj.nnz == 0
        assert labels.shape == (30,)

    def test_unit_probabilities_complete(self):
        cfg = SbmConfig(num_nodes=20, num_dims=1, p_in=1.0, p_out=1.0)
        adj, _ = generate_dimension(cfg, np.random.default_rng(0))
        expected = np.ones((20, 20)) - np.eye(20)
        assert np.array_equal(adj.to_dense(), expected)

    def test_structure_valid(self):
        cfg = SbmConfig(num_nodes=60, num_dims=1, p_in=0.3, p_out=0.05)
        adj, labels = generate_dimension(cfg, np.random.default_rng(1))
        assert adj.is_symmetric()
        assert adj.has_zero_diagonal()
        assert adj.is_binary()
        assert set(np.unique(labels)) <= {0, 1}

    def test_edge_count_within_three_sigma(self):
        cfg = SbmConfig(num_nodes=1000, num_dims=1)
        rng = np.random.default_rng(7)
        labels_seen = []
        for _ in range(3):
            adj, labels = generate_dimension(cfg, rng)
            labels_seen.append(labels)
            within_mean, cross_mean, within_pairs, cross_pairs = expected_edge_counts(
                labels, cfg
            )
            same = labels[:, None] == labels[None, :]
            dense = adj.to_dense().astype(bool)
            triu = np.triu(np.ones((1000, 1000), dtype=bool), 1)
            within_edges = int((dense & same & triu).sum())
            cross_edges = int((dense & ~same & triu).sum())
            sigma_w = np.sqrt(within_pairs * cfg.p_in * (1 - cfg.p_in))
            sigma_c = np.sqrt(cross_pairs * cfg.p_out * (1 - cfg.p_out))
            assert abs(within_edges - within_mean) <= 3 * sigma_w
            assert abs(cross_edges - cross_mean) <= 3 * sigma_c
        # consecutive draws differ
        assert not np.array_equal(labels_seen[0], labels_seen[1])


class TestGenerateMultiplex:
    def test_single_dimension_global_equals_local(self):
        ds = generate_multiplex(SbmConfig(num_nodes=50, num_dims=1, p_in=0.3, p_out=0.1, rng_seed=3))
        assert np.array_equal(ds.global_labels, ds.per_dim_labels[0])

    def test_majority_vote(self):
        # a node in class c1 twice and c2 once lands in c1
        ds = generate_multiplex(SbmConfig(num_nodes=200, num_dims=3, p_in=0.2, p_out=0.05, rng_seed=5))
        counts = np.zeros((200, 2))
        for d in range(3):
            counts[np.arange(200), ds.per_dim_labels[d]] += 1
        decided = counts.max(axis=1) >= 2  # always true for odd D, K=2
        assert decided.all()
        assert np.array_equal(ds.global_labels, np.argmax(counts, axis=1))

    def test_tie_break_deterministic(self):
        cfg = SbmConfig(num_nodes=120, num_dims=2, p_in=0.2, p_out=0.05, rng_seed=11)
        a = generate_multiplex(cfg)
        b = generate_multiplex(cfg)
        assert np.array_equal(a.global_labels, b.global_labels)
        # with D=2 ties exist and both classes win some of them
        ties = a.per_dim_labels[0] != a.per_dim_labels[1]
        assert ties.any()
        tie_choices = a.global_labels[ties]
        assert set(np.unique(tie_choices)) == {0, 1}

    def test_same_seed_identical_dataset(self):
        cfg = SbmConfig(num_nodes=80, num_dims=3, p_in=0.2, p_out=0.02, rng_seed=21)
        a = generate_multiplex(cfg)
        b = generate_multiplex(cfg)
        assert np.array_equal(a.graph.features, b.graph.features)
        assert np.array_equal(a.per_dim_labels, b.per_dim_labels)
        for da, db in zip(a.graph.dimensions, b.graph.dimensions):
            assert da.equals(db)

    def test_different_seeds_differ(self):
        a = generate_multiplex(SbmConfig(num_nodes=80, num_dims=2, p_in=0.2, p_out=0.02, rng_seed=1))
        b = generate_multiplex(SbmConfig(num_nodes=80, num_dims=2, p_in=0.2, p_out=0.02, rng_seed=2))
        assert not np.array_equal(a.per_dim_labels, b.per_dim_labels)

    def test_features_are_normalized_degrees(self):
        ds = generate_multiplex(SbmConfig(num_nodes=60, num_dims=2, p_in=0.4, p_out=0.1, rng_seed=9))
        feats = ds.graph.features
        assert feats.shape == (60, 2)
        for d, adj in enumerate(ds.graph.dimensions):
            deg = adj.row_sums()
            assert np.allclose(feats[:, d], deg / deg.max())
        assert feats.max() == 1.0

    def test_global_label_balance(self):
        ds = generate_multiplex(SbmConfig(num_nodes=1500, num_dims=5, rng_seed=13))
        freq = np.bincount(ds.global_labels, minlength=2) / 1500
        assert 0.4 <= freq[0] <= 0.6 and 0.4 <= freq[1] <= 0.6

    def test_graph_labels_mirror_votes(self):
        ds = generate_multiplex(SbmConfig(num_nodes=40, num_dims=3, p_in=0.3, p_out=0.1, rng_seed=17))
        assert ds.graph.labels == tuple((int(c),) for c in ds.global_labels)


class TestSaveDataset:
    def test_writes_audit_file(self, tmp_path):
        ds = generate_multiplex(SbmConfig(num_nodes=20, num_dims=3, p_in=0.4, p_out=0.1, rng_seed=2))
        save_dataset(ds, tmp_path / "out")
        audit = (tmp_path / "out" / PER_DIM_LABELS_FILE).read_text().splitlines()
        assert len(audit) == 20
        first = [int(x) for x in audit[0].split(",")]
        assert first == list(ds.per_dim_labels[:, 0])
