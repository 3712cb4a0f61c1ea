import math

import numpy as np
import pytest

from hmge.errors import ConfigError
from hmge.model import (
    EncodePlan,
    HmgeConfig,
    HmgeParams,
    LinearParams,
    attention_aggregate,
    combine_adjacencies,
    discriminate,
    encode,
    gcn_forward,
    init_linear_params,
    init_params,
    linear_aggregation_encode,
    load_model,
    readout,
    save_model,
    softmax_alpha,
)
from hmge.multiplex import MultiplexGraph, SparseAdjacency, normalize_adjacency
from hmge.model import param_leaves


def random_sym_dense(n, rng, density=0.4):
    m = (rng.random((n, n)) < density).astype(float)
    m = np.triu(m, 1)
    return m + m.T


def circulant_dense(n, offsets):
    """Symmetric circulant adjacency; circulants commute with one another."""
    m = np.zeros((n, n))
    for k in offsets:
        for i in range(n):
            m[i, (i + k) % n] = 1.0
            m[(i + k) % n, i] = 1.0
    np.fill_diagonal(m, 0.0)
    return m


def two_dim_graph(a1, a2, x):
    n = a1.shape[0]
    return MultiplexGraph(
        n,
        (SparseAdjacency.from_dense(a1), SparseAdjacency.from_dense(a2)),
        x,
    )


class TestConfig:
    def test_schedule_defaults(self):
        assert HmgeConfig(num_layers=2).schedule_for(41) == (41, 21, 1)
        assert HmgeConfig(num_layers=2).schedule_for(3) == (3, 2, 1)
        assert HmgeConfig(num_layers=1).schedule_for(5) == (5, 1)
        assert HmgeConfig(num_layers=0).schedule_for(7) == (7,)

    def test_trailing_ones_allowed(self):
        assert HmgeConfig(num_layers=1, dims_schedule=(1, 1)).schedule_for(1) == (1, 1)
        assert HmgeConfig(num_layers=2).schedule_for(2) == (2, 1, 1)

    def test_increasing_schedule_rejected(self):
        with pytest.raises(ConfigError):
            HmgeConfig(num_layers=2, dims_schedule=(3, 4, 1))
        with pytest.raises(ConfigError):
            HmgeConfig(num_layers=2, dims_schedule=(3, 3, 1))

    def test_schedule_graph_mismatch(self):
        cfg = HmgeConfig(num_layers=1, dims_schedule=(3, 1))
        with pytest.raises(ConfigError):
            cfg.schedule_for(4)

    def test_bad_activation(self):
        with pytest.raises(ConfigError):
            HmgeConfig(activation="gelu")


class TestGcnForward:
    def test_edgeless_identity_passthrough(self):
        adj = SparseAdjacency.from_dense(np.zeros((3, 3)))
        norm = normalize_adjacency(adj)  # identity matrix
        h = np.abs(np.random.default_rng(0).standard_normal((3, 3)))
        out = gcn_forward(h, norm, np.eye(3))
        assert np.allclose(out, h, atol=0, rtol=0)

    def test_zero_weights_give_zero(self):
        adj = SparseAdjacency.from_undirected_edges(3, [0], [1])
        out = gcn_forward(np.ones((3, 2)), normalize_adjacency(adj), np.zeros((2, 4)))
        assert np.array_equal(out, np.zeros((3, 4)))

    def test_two_node_hand_value(self):
        adj = SparseAdjacency.from_undirected_edges(2, [0], [1])
        out = gcn_forward(np.array([[1.0], [0.0]]), normalize_adjacency(adj), np.array([[1.0]]))
        assert np.abs(out - np.array([[0.5], [0.5]])).max() < 1e-15

    def test_relu_applied(self):
        adj = SparseAdjacency.from_dense(np.zeros((2, 2)))
        out = gcn_forward(np.array([[1.0], [1.0]]), normalize_adjacency(adj), np.array([[-2.0]]))
        assert np.array_equal(out, np.zeros((2, 1)))


class TestAttentionAggregate:
    def test_single_dimension_identity(self):
        h = np.random.default_rng(0).standard_normal((4, 3))
        agg, beta = attention_aggregate([h], [np.eye(3)], [np.ones(3)])
        assert np.array_equal(agg, h)
        assert np.array_equal(beta, np.ones((4, 1)))

    def test_identical_dimensions_split_evenly(self):
        rng = np.random.default_rng(1)
        h = np.abs(rng.standard_normal((5, 3))) + 0.1
        v, y = np.eye(3), np.ones(3)
        agg, beta = attention_aggregate([h, h], [v, v], [y, y])
        assert np.abs(beta - 0.5).max() < 1e-12
        assert np.allclose(agg, h)

    def test_hand_set_scores(self):
        # scores 0.3 and 0.6 for every node -> weights 1/3 and 2/3
        h1 = np.full((2, 1), math.atanh(0.3))
        h2 = np.full((2, 1), math.atanh(0.6))
        v, y = np.array([[1.0]]), np.array([1.0])
        agg, beta = attention_aggregate([h1, h2], [v, v], [y, y])
        assert np.abs(beta[0] - np.array([1 / 3, 2 / 3])).max() < 1e-12
        expected = (1 / 3) * h1[0] + (2 / 3) * h2[0]
        assert np.abs(agg[0] - expected).max() < 1e-12

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        mats = [rng.standard_normal((6, 4)) for _ in range(3)]
        vs = [rng.standard_normal((4, 4)) for _ in range(3)]
        ys = [rng.standard_normal(4) for _ in range(3)]
        _, beta = attention_aggregate(mats, vs, ys)
        assert np.abs(beta.sum(axis=1) - 1.0).max() < 1e-9

    def test_guard_fallback_uniform(self):
        import math

        from hmge.autodiff import uniform_weights

        # zero scores for every dimension trip the guard
        h = np.zeros((3, 2))
        v, y = np.eye(2), np.ones(2)
        _, beta = attention_aggregate([h, h, h], [v] * 3, [y] * 3)
        assert np.abs(beta - 1 / 3).max() < 1e-15
        for row in beta:
            assert np.array_equal(row, uniform_weights(3))
            assert math.fsum(row) == 1.0


class TestCombineAdjacencies:
    def test_single_input_passthrough(self):
        adj = SparseAdjacency.from_undirected_edges(3, [0], [1])
        outs = combine_adjacencies([adj], np.zeros((1, 1)))
        assert len(outs) == 1
        assert np.allclose(outs[0].to_dense(), adj.to_dense())

    def test_equal_logits_average(self):
        rng = np.random.default_rng(0)
        a1 = random_sym_dense(5, rng)
        a2 = random_sym_dense(5, rng)
        g1, g2 = SparseAdjacency.from_dense(a1), SparseAdjacency.from_dense(a2)
        outs = combine_adjacencies([g1, g2], np.zeros((2, 1)))
        assert np.allclose(outs[0].to_dense(), 0.5 * a1 + 0.5 * a2)

    def test_disjoint_edges_both_present(self):
        g1 = SparseAdjacency.from_undirected_edges(3, [0], [1])
        g2 = SparseAdjacency.from_undirected_edges(3, [1], [2])
        out = combine_adjacencies([g1, g2], np.zeros((2, 1)))[0].to_dense()
        assert out[0, 1] == 0.5 and out[1, 2] == 0.5

    def test_output_pattern_is_union(self):
        g1 = SparseAdjacency.from_undirected_edges(4, [0], [1])
        g2 = SparseAdjacency.from_undirected_edges(4, [2], [3])
        out = combine_adjacencies([g1, g2], np.zeros((2, 2)))
        assert out[0].nnz == 4 and out[1].nnz == 4

    def test_symmetric_output(self):
        rng = np.random.default_rng(1)
        adjs = [SparseAdjacency.from_dense(random_sym_dense(6, rng)) for _ in range(3)]
        outs = combine_adjacencies(adjs, rng.standard_normal((3, 2)))
        for o in outs:
            dense = o.to_dense()
            assert np.abs(dense - dense.T).max() == 0.0

    def test_softmax_columns_sum_to_one(self):
        logits = np.random.default_rng(3).standard_normal((4, 3)) * 5
        w = softmax_alpha(logits)
        assert np.abs(w.sum(axis=0) - 1.0).max() < 1e-12


class TestReadoutDiscriminate:
    def test_readout_zeros(self):
        assert np.array_equal(readout(np.zeros((4, 3))), np.zeros(3))

    def test_readout_identical_rows(self):
        r = np.array([2.0, -1.0, 0.5])
        z = np.tile(r, (5, 1))
        assert np.array_equal(readout(z), r)

    def test_readout_mean(self):
        z = np.array([[1.0, 3.0], [3.0, 5.0]])
        assert np.array_equal(readout(z), np.array([2.0, 4.0]))

    def test_discriminate_zero_matrix(self):
        rng = np.random.default_rng(0)
        assert discriminate(rng.standard_normal(4), rng.standard_normal(4), np.zeros((4, 4))) == 0.5

    def test_discriminate_identity_unit(self):
        e1 = np.zeros(3)
        e1[0] = 1.0
        val = discriminate(e1, e1, np.eye(3))
        assert abs(val - 1.0 / (1.0 + math.exp(-1.0))) < 1e-12

    def test_discriminate_matches_direct(self):
        rng = np.random.default_rng(1)
        h, s = rng.standard_normal(5), rng.standard_normal(5)
        q = rng.standard_normal((5, 5))
        direct = 1.0 / (1.0 + math.exp(-float(h @ q @ s)))
        assert abs(discriminate(h, s, q) - direct) < 1e-12


def oracle_instance(rng, commuting: bool, m=4, n=5):
    """(graph, params, config, alpha weights, X, W) for the closed-form tests."""
    if commuting:
        options = [(1,), (2,), (1, 2)]
        a1 = circulant_dense(n, options[rng.integers(0, 3)])
        a2 = circulant_dense(n, options[rng.integers(0, 3)])
    else:
        a1, a2 = random_sym_dense(n, rng), random_sym_dense(n, rng)
    x = rng.standard_normal((n, m))
    w = rng.standard_normal((m, m))
    logits = rng.standard_normal((2, 1))
    weights = softmax_alpha(logits)[:, 0]
    graph = two_dim_graph(a1, a2, x)
    config = HmgeConfig(embed_size=m, num_layers=1, dims_schedule=(2, 1), activation="identity")
    params = init_params(config, 2, m, rng)
    params.layers[0].alpha = logits.copy()
    params.layers[0].gcn_w = [w.copy(), w.copy()]
    params.final_w = w.copy()
    return graph, params, config, weights, (a1, a2, x, w)


class TestClosedFormOracles:
    def test_hierarchical_matches_product_form_any_graph(self):
        # Unsimplified two-layer form: (a1 A1 + a2 A2)(A1 + A2) X W^2.
        for trial in range(20):
            rng = np.random.default_rng(500 + trial)
            graph, params, config, w8s, (a1, a2, x, w) = oracle_instance(rng, commuting=False)
            trace = encode(graph, params, config, normalize=False, attention_mode="sum")
            expected = (w8s[0] * a1 + w8s[1] * a2) @ (a1 + a2) @ x @ w @ w
            assert np.abs(trace.z - expected).max() < 1e-8

    def test_hierarchical_matches_printed_closed_form_commuting(self):
        # (a1 A1^2 + (a1+a2) A1 A2 + a2 A2^2) X W^2 needs A1 A2 = A2 A1;
        # circulant pairs commute, so the printed form is exact there.
        for trial in range(20):
            rng = np.random.default_rng(900 + trial)
            graph, params, config, w8s, (a1, a2, x, w) = oracle_instance(rng, commuting=True)
            trace = encode(graph, params, config, normalize=False, attention_mode="sum")
            expected = (
                w8s[0] * a1 @ a1 + (w8s[0] + w8s[1]) * a1 @ a2 + w8s[1] * a2 @ a2
            ) @ x @ w @ w
            assert np.abs(trace.z - expected).max() < 1e-8

    def test_linear_aggregation_matches_closed_form(self):
        # (A1^2 + A2^2) X W^2 holds for arbitrary graphs.
        for trial in range(20):
            rng = np.random.default_rng(700 + trial)
            a1, a2 = random_sym_dense(5, rng), random_sym_dense(5, rng)
            x = rng.standard_normal((5, 4))
            w = rng.standard_normal((4, 4))
            graph = two_dim_graph(a1, a2, x)
            params = init_linear_params(4, 2, 4, 2, rng)
            params.gcn_w = [[w.copy(), w.copy()], [w.copy(), w.copy()]]
            z = linear_aggregation_encode(
                graph, params, normalize=False, attention_mode="sum", activation="identity"
            )
            expected = (a1 @ a1 + a2 @ a2) @ x @ w @ w
            assert np.abs(z - expected).max() < 1e-8


class TestEncode:
    def make_graph(self, n=8, dims=2, seed=0, density=0.5):
        rng = np.random.default_rng(seed)
        mats = [
            SparseAdjacency.from_dense(random_sym_dense(n, rng, density))
            for _ in range(dims)
        ]
        x = rng.standard_normal((n, 3))
        return MultiplexGraph(n, tuple(mats), x)

    def test_zero_layers_equals_linear_depth_one(self):
        graph = self.make_graph()
        cfg = HmgeConfig(embed_size=4, num_layers=0)
        params = init_params(cfg, 2, 3, np.random.default_rng(1))
        assert isinstance(params, LinearParams)
        trace = encode(graph, params, cfg)
        z2 = linear_aggregation_encode(graph, params)
        assert np.array_equal(trace.z, z2)

    def test_single_dimension_is_plain_gcn_stack(self):
        graph = self.make_graph(dims=1)
        cfg = HmgeConfig(embed_size=4, num_layers=1, dims_schedule=(1, 1))
        params = init_params(cfg, 1, 3, np.random.default_rng(2))
        trace = encode(graph, params, cfg)
        norm = normalize_adjacency(graph.dimensions[0])
        h1 = gcn_forward(graph.features, norm, params.layers[0].gcn_w[0])
        # the embedding head is linear
        z = gcn_forward(h1, norm, params.final_w, activation="identity")
        assert np.abs(trace.z - z).max() < 1e-12

    def test_trace_shapes_and_invariants(self):
        graph = self.make_graph(dims=3)
        cfg = HmgeConfig(embed_size=4, num_layers=2, dims_schedule=(3, 2, 1))
        params = init_params(cfg, 3, 3, np.random.default_rng(3))
        trace = encode(graph, params, cfg)
        assert [len(layer) for layer in trace.latent_adjacencies] == [2, 1]
        assert trace.z.shape == (8, 4)
        assert trace.summary.shape == (4,)
        for beta in trace.attention:
            assert np.abs(beta.sum(axis=1) - 1.0).max() < 1e-9
        for layer in trace.latent_adjacencies:
            for adj in layer:
                dense = adj.to_dense()
                assert np.abs(dense - dense.T).max() == 0.0

    def test_wrong_dimension_count_raises(self):
        graph = self.make_graph(dims=2)
        cfg = HmgeConfig(embed_size=4, num_layers=1, dims_schedule=(3, 1))
        params = init_params(cfg, 3, 3, np.random.default_rng(4))
        with pytest.raises(ConfigError):
            encode(graph, params, cfg)

    def test_permutation_equivariance(self):
        graph = self.make_graph(n=8, dims=2, seed=5)
        cfg = HmgeConfig(embed_size=4, num_layers=1)
        params = init_params(cfg, 2, 3, np.random.default_rng(6))
        trace = encode(graph, params, cfg)

        perm = np.random.default_rng(7).permutation(8)
        inv = np.argsort(perm)
        perm_dims = []
        for d in graph.dimensions:
            dense = d.to_dense()[np.ix_(perm, perm)]
            perm_dims.append(SparseAdjacency.from_dense(dense))
        perm_graph = MultiplexGraph(8, tuple(perm_dims), graph.features[perm])
        trace_p = encode(perm_graph, params, cfg)
        assert np.abs(trace_p.z[inv] - trace.z).max() < 1e-9

    def test_identity_features_match_dense_path(self):
        rng = np.random.default_rng(9)
        mats = [
            SparseAdjacency.from_dense(random_sym_dense(10, rng, 0.5)) for _ in range(2)
        ]
        eye_graph = MultiplexGraph(10, tuple(mats), np.eye(10))
        cfg = HmgeConfig(embed_size=3, num_layers=1)
        params = init_params(cfg, 2, 10, np.random.default_rng(10))
        plan_fast = EncodePlan(eye_graph, cfg)
        assert plan_fast.identity_features
        trace_fast = encode(eye_graph, params, cfg, plan=plan_fast)
        plan_slow = EncodePlan(eye_graph, cfg)
        plan_slow.identity_features = False
        plan_slow.orig_prop = [m.matmul_dense(eye_graph.features) for m in plan_slow.orig_gcn]
        plan_slow.orig_prop_stack = np.stack(plan_slow.orig_prop, axis=0)
        trace_slow = encode(eye_graph, params, cfg, plan=plan_slow)
        assert np.abs(trace_fast.z - trace_slow.z).max() < 1e-12


class TestLinearAggregation:
    def test_identical_dimensions_halve_attention(self):
        rng = np.random.default_rng(0)
        a = random_sym_dense(6, rng)
        x = rng.standard_normal((6, 3))
        graph2 = two_dim_graph(a, a, x)
        graph1 = MultiplexGraph(6, (SparseAdjacency.from_dense(a),), x)
        params2 = init_linear_params(4, 2, 3, 1, rng)
        # same stack and attention for both dims
        params2.gcn_w[1] = [w.copy() for w in params2.gcn_w[0]]
        params2.attn_v[1] = params2.attn_v[0].copy()
        params2.attn_y[1] = params2.attn_y[0].copy()
        params1 = LinearParams(
            gcn_w=[[w.copy() for w in params2.gcn_w[0]]],
            attn_v=[params2.attn_v[0].copy()],
            attn_y=[params2.attn_y[0].copy()],
            disc_q=params2.disc_q.copy(),
        )
        z2 = linear_aggregation_encode(graph2, params2)
        z1 = linear_aggregation_encode(graph1, params1)
        # identical dims with identical weights: attention 0.5/0.5 reproduces
        # the single-dimension embedding
        assert np.abs(z2 - z1).max() < 1e-12


class TestModelFile:
    def test_round_trip_hierarchical(self, tmp_path):
        cfg = HmgeConfig(embed_size=3, num_layers=2, dims_schedule=(3, 2, 1))
        params = init_params(cfg, 3, 5, np.random.default_rng(0))
        path = tmp_path / "model.bin"
        save_model(path, cfg, params)
        cfg2, params2 = load_model(path)
        assert cfg2 == cfg
        assert isinstance(params2, HmgeParams)
        for (_, a, _, _), (_, b, _, _) in zip(param_leaves(params), param_leaves(params2)):
            assert np.array_equal(a, b)

    def test_round_trip_linear(self, tmp_path):
        params = init_linear_params(4, 3, 5, 2, np.random.default_rng(1))
        cfg = HmgeConfig(embed_size=4, num_layers=0)
        path = tmp_path / "model.bin"
        save_model(path, cfg, params)
        cfg2, params2 = load_model(path)
        assert isinstance(params2, LinearParams)
        assert params2.depth == 2
        for (_, a, _, _), (_, b, _, _) in zip(param_leaves(params), param_leaves(params2)):
            assert np.array_equal(a, b)

    def test_bad_file_rejected(self, tmp_path):
        from hmge.errors import DataFormatError

        bad = tmp_path / "junk.bin"
        bad.write_bytes(b"not a model")
        with pytest.raises(DataFormatError):
            load_model(bad)
