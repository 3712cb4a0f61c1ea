"""Synthetic multiplex generation from per-dimension stochastic block models.

Every dimension is an independent SBM draw with its own class assignment;
a node's global label is the mode of its per-dimension labels, with ties
broken uniformly at random from the dataset seed. Node features are the
per-dimension degrees normalized by each dimension's maximum degree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .multiplex import MultiplexGraph, SparseAdjacency, save_multiplex

PER_DIM_LABELS_FILE = "labels_per_dim.csv"


@dataclass(frozen=True)
class SbmConfig:
    num_nodes: int
    num_dims: int
    num_classes: int = 2
    class_probs: tuple[float, ...] | None = None
    p_in: float = 0.05
    p_out: float = 0.01
    rng_seed: int = 0

    def __post_init__(self):
        if self.num_nodes < 1 or self.num_dims < 1:
            raise ConfigError("num_nodes and num_dims must be positive")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.class_probs is None:
            probs = tuple([1.0 / self.num_classes] * self.num_classes)
        else:
            probs = tuple(float(p) for p in self.class_probs)
        object.__setattr__(self, "class_probs", probs)
        if len(probs) != self.num_classes or any(p < 0 for p in probs):
            raise ConfigError(f"bad class probabilities {probs}")
        if not math.isclose(sum(probs), 1.0, abs_tol=1e-9):
            raise ConfigError(f"class probabilities must sum to 1, got {sum(probs)}")
        if not (0.0 <= self.p_out <= self.p_in <= 1.0):
            raise ConfigError(
                f"need 0 <= p_out <= p_in <= 1, got p_in={self.p_in} p_out={self.p_out}"
            )


@dataclass
class SynthDataset:
    graph: MultiplexGraph
    per_dim_labels: np.ndarray   # D x N
    global_labels: np.ndarray    # N


def generate_dimension(
    config: SbmConfig, rng: np.random.Generator
) -> tuple[SparseAdjacency, np.ndarray]:
    """One SBM draw: class labels plus a symmetric loop-free adjacency."""
    n = config.num_nodes
    labels = rng.choice(config.num_classes, size=n, p=np.asarray(config.class_probs))
    iu, iv = np.triu_indices(n, k=1)
    same = labels[iu] == labels[iv]
    prob = np.where(same, config.p_in, config.p_out)
    mask = rng.random(prob.shape[0]) < prob
    adjacency = SparseAdjacency.from_undirected_edges(n, iu[mask], iv[mask])
    return adjacency, labels


def generate_multiplex(config: SbmConfig) -> SynthDataset:
    """D independent SBM dimensions fused by label voting.

    Dimension d is drawn from the d-th child of the seed sequence, so the
    dataset is reproducible and dimensions could be generated in parallel.
    """
    children = np.random.SeedSequence(config.rng_seed).spawn(config.num_dims + 1)
    dims = []
    per_dim = np.empty((config.num_dims, config.num_nodes), dtype=np.int64)
    for d in range(config.num_dims):
        adjacency, labels = generate_dimension(config, np.random.default_rng(children[d]))
        dims.append(adjacency)
        per_dim[d] = labels

    vote_rng = np.random.default_rng(children[config.num_dims])
    counts = np.zeros((config.num_nodes, config.num_classes))
    node_idx = np.arange(config.num_nodes)
    for d in range(config.num_dims):
        counts[node_idx, per_dim[d]] += 1.0
    # Sub-unit jitter never reorders distinct counts but breaks ties uniformly.
    jitter = vote_rng.random(counts.shape)
    global_labels = np.argmax(counts + jitter, axis=1).astype(np.int64)

    features = np.zeros((config.num_nodes, config.num_dims))
    for d, adjacency in enumerate(dims):
        deg = adjacency.row_sums()
        top = deg.max()
        if top > 0:
            features[:, d] = deg / top

    graph = MultiplexGraph(
        config.num_nodes,
        tuple(dims),
        features,
        tuple((int(c),) for c in global_labels),
    )
    return SynthDataset(graph=graph, per_dim_labels=per_dim, global_labels=global_labels)


def save_dataset(dataset: SynthDataset, path) -> None:
    """Dataset directory plus a per-dimension label audit file."""
    save_multiplex(dataset.graph, path)
    rows = dataset.per_dim_labels.T
    lines = [",".join(str(int(c)) for c in row) for row in rows]
    (Path(path) / PER_DIM_LABELS_FILE).write_text("\n".join(lines) + "\n")


def expected_edge_counts(labels: np.ndarray, config: SbmConfig) -> tuple[float, float, int, int]:
    """(expected within, expected cross, within pairs, cross pairs) for a
    realized class assignment: the oracle for density checks."""
    sizes = np.bincount(labels, minlength=config.num_classes)
    within_pairs = int(sum(s * (s - 1) // 2 for s in sizes))
    total_pairs = config.num_nodes * (config.num_nodes - 1) // 2
    cross_pairs = int(total_pairs - within_pairs)
    return (
        within_pairs * config.p_in,
        cross_pairs * config.p_out,
        within_pairs,
        cross_pairs,
    )
