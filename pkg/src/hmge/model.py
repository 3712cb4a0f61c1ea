"""Hierarchical multiplex graph encoder.

Each layer runs two phases: (1) a GCN per current dimension followed by a
trainable attention aggregation of the per-dimension embeddings; (2) a
softmax-weighted non-linear combination of the current adjacency matrices
into fewer latent adjacencies. After the last layer a plain GCN on the
single remaining latent graph produces the embeddings Z. A bilinear
discriminator against the mean-readout summary drives the InfoMax loss.

The linear-aggregation baseline (per-dimension GCN stacks plus one attention
step, no adjacency combination) doubles as the zero-layer configuration.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .errors import ConfigError, DataFormatError
from .multiplex import (
    MultiplexGraph,
    NormalizedAdjacency,
    SparseAdjacency,
    normalize_adjacency,
)

ACTIVATIONS = ("relu", "identity")
ATTENTION_MODES = ("learned", "sum")
ATTENTION_GUARD = 1e-6
MODEL_FORMAT_VERSION = 1


def _validate_schedule(schedule: tuple[int, ...], num_layers: int) -> None:
    if len(schedule) != num_layers + 1:
        raise ConfigError(
            f"dims schedule needs {num_layers + 1} entries, got {len(schedule)}"
        )
    if any(d < 1 for d in schedule):
        raise ConfigError(f"dims schedule entries must be positive: {schedule}")
    if num_layers >= 1 and schedule[-1] != 1:
        raise ConfigError(f"dims schedule must end at a single dimension: {schedule}")
    for prev, nxt in zip(schedule, schedule[1:]):
        # Strictly decreasing until the width hits 1; trailing 1s are allowed.
        if nxt > prev or (nxt == prev and nxt != 1):
            raise ConfigError(f"dims schedule must decrease towards 1: {schedule}")


@dataclass(frozen=True)
class HmgeConfig:
    """Encoder hyperparameters.

    ``dims_schedule`` lists the dimension count entering each level,
    ``[D_0, D_1, ..., D_L]`` with ``D_L = 1``; None derives a halving
    schedule. ``activation`` switches every non-linearity at once; the
    identity setting exists for closed-form tests.
    """

    embed_size: int = 64
    num_layers: int = 2
    dims_schedule: tuple[int, ...] | None = None
    activation: str = "relu"

    def __post_init__(self):
        if self.embed_size < 1:
            raise ConfigError(f"embed_size must be positive, got {self.embed_size}")
        if self.num_layers < 0:
            raise ConfigError(f"num_layers must be >= 0, got {self.num_layers}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.dims_schedule is not None:
            schedule = tuple(int(d) for d in self.dims_schedule)
            object.__setattr__(self, "dims_schedule", schedule)
            _validate_schedule(schedule, self.num_layers)

    def schedule_for(self, num_dims: int) -> tuple[int, ...]:
        """Resolve the dimension schedule for a graph with ``num_dims`` inputs."""
        if self.num_layers == 0:
            if self.dims_schedule is not None and self.dims_schedule != (num_dims,):
                raise ConfigError(
                    f"schedule {self.dims_schedule} inconsistent with zero layers"
                )
            return (num_dims,)
        if self.dims_schedule is not None:
            if self.dims_schedule[0] != num_dims:
                raise ConfigError(
                    f"schedule starts at {self.dims_schedule[0]} but the graph has "
                    f"{num_dims} dimensions"
                )
            return self.dims_schedule
        schedule = [num_dims]
        for _ in range(self.num_layers - 1):
            schedule.append(max(1, math.ceil(schedule[-1] / 2)))
        schedule.append(1)
        _validate_schedule(tuple(schedule), self.num_layers)
        return tuple(schedule)


def activate(node: ad.Node, kind: str) -> ad.Node:
    return ad.relu(node) if kind == "relu" else node


@dataclass
class LayerParams:
    """Trainables of one hierarchical layer (indexed by input dimension)."""

    alpha: np.ndarray            # combination logits, D_in x D_out
    gcn_w: list[np.ndarray]      # per dim: prev_width x M
    attn_v: list[np.ndarray]     # per dim: M x M
    attn_y: list[np.ndarray]     # per dim: M

    def copy(self) -> "LayerParams":
        return LayerParams(
            self.alpha.copy(),
            [w.copy() for w in self.gcn_w],
            [v.copy() for v in self.attn_v],
            [y.copy() for y in self.attn_y],
        )


@dataclass
class HmgeParams:
    """Full parameter set: per-layer trainables, final GCN weight, discriminator."""

    layers: list[LayerParams]
    final_w: np.ndarray
    disc_q: np.ndarray

    def copy(self) -> "HmgeParams":
        return HmgeParams(
            [l.copy() for l in self.layers], self.final_w.copy(), self.disc_q.copy()
        )


@dataclass
class LinearParams:
    """Parameters of the linear-aggregation baseline.

    ``gcn_w[d]`` holds the per-level weight stack of dimension d; one
    attention aggregation sits on top of the stacks.
    """

    gcn_w: list[list[np.ndarray]]
    attn_v: list[np.ndarray]
    attn_y: list[np.ndarray]
    disc_q: np.ndarray

    @property
    def depth(self) -> int:
        return len(self.gcn_w[0])

    def copy(self) -> "LinearParams":
        return LinearParams(
            [[w.copy() for w in stack] for stack in self.gcn_w],
            [v.copy() for v in self.attn_v],
            [y.copy() for y in self.attn_y],
            self.disc_q.copy(),
        )


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape)


def _attention_init(rng: np.random.Generator, m: int):
    """Identity-like V and positive y.

    Embeddings are non-negative after ReLU, so positive-leaning scores keep
    the signed attention normalization away from its near-zero-sum
    pathology at the start of training (sign-symmetric draws blow the
    weights up by orders of magnitude and stall learning).
    """
    v = np.eye(m) + _uniform_init(rng, (m, m), m) * 0.1
    y = rng.uniform(0.0, 1.0 / math.sqrt(m), size=m)
    return v, y


def init_params(
    config: HmgeConfig, num_dims: int, num_features: int, rng: np.random.Generator
):
    """Fresh parameters: uniform(+-1/sqrt(fan_in)) GCN/discriminator weights,
    identity-leaning attention, zero alpha logits.

    Zero logits make every input dimension contribute equally at step 0.
    Returns LinearParams (depth 1) when the config has no hierarchical
    layers.
    """
    m = config.embed_size
    if config.num_layers == 0:
        return init_linear_params(m, num_dims, num_features, 1, rng)
    schedule = config.schedule_for(num_dims)
    layers = []
    width = num_features
    for l in range(config.num_layers):
        d_in, d_out = schedule[l], schedule[l + 1]
        attn = [_attention_init(rng, m) for _ in range(d_in)]
        layers.append(
            LayerParams(
                alpha=np.zeros((d_in, d_out)),
                gcn_w=[_uniform_init(rng, (width, m), width) for _ in range(d_in)],
                attn_v=[v for v, _ in attn],
                attn_y=[y for _, y in attn],
            )
        )
        width = m
    final_w = _uniform_init(rng, (m, m), m)
    disc_q = _uniform_init(rng, (m, m), m)
    return HmgeParams(layers, final_w, disc_q)


def init_linear_params(
    embed_size: int,
    num_dims: int,
    num_features: int,
    depth: int,
    rng: np.random.Generator,
) -> LinearParams:
    if depth < 1:
        raise ConfigError(f"linear aggregation depth must be >= 1, got {depth}")
    m = embed_size
    stacks = []
    for _ in range(num_dims):
        widths = [num_features] + [m] * (depth - 1)
        stacks.append([_uniform_init(rng, (w, m), w) for w in widths])
    attn = [_attention_init(rng, m) for _ in range(num_dims)]
    return LinearParams(
        gcn_w=stacks,
        attn_v=[v for v, _ in attn],
        attn_y=[y for _, y in attn],
        disc_q=_uniform_init(rng, (m, m), m),
    )


@dataclass
class ForwardTrace:
    """Everything one encode pass computed, layer by layer."""

    latent_adjacencies: list[list[SparseAdjacency]]
    embeddings: list[np.ndarray]
    attention: list[np.ndarray | None]
    z: np.ndarray
    summary: np.ndarray
    z_hat: np.ndarray | None = None


# ---------------------------------------------------------------------------
# forward-pass plumbing


class EncodePlan:
    """Per-graph precomputation shared by every epoch.

    Holds the normalized input dimensions (constants), the union sparsity
    pattern hosting all latent adjacencies, and position maps of each input
    dimension into that pattern.
    """

    def __init__(
        self,
        graph: MultiplexGraph,
        config: HmgeConfig,
        normalize: bool = True,
        dense_mode: bool | None = None,
    ):
        self.config = config
        self.schedule = config.schedule_for(graph.num_dims)
        self.normalize = normalize
        self.num_nodes = graph.num_nodes
        self.num_features = graph.num_features
        self.features = graph.features
        if normalize:
            self.orig_gcn = [normalize_adjacency(d) for d in graph.dimensions]
        else:
            self.orig_gcn = list(graph.dimensions)
        # With one-hot node features the first GCN collapses to A_norm @ W
        # (and A_norm @ W[perm] on the corrupted side): no dense propagation.
        self.identity_features = _is_identity(graph.features)
        if self.identity_features:
            self.orig_prop = None
            self.orig_prop_stack = None
        else:
            # First-layer propagation of the clean features never changes.
            self.orig_prop = [m.matmul_dense(graph.features) for m in self.orig_gcn]
            self.orig_prop_stack = np.stack(self.orig_prop, axis=0)
        self.union = None
        self.orig_maps = None
        self.orig_values = None
        self.orig_stacked = None
        self.orig_stacked_t = None
        self.norm_plan = None
        self.raw_spmm = None
        if config.num_layers >= 1:
            self.union = ad.UnionPattern.union(graph.dimensions)
            self.orig_maps = [self.union.position_map(d) for d in graph.dimensions]
            self.orig_values = [d.values for d in graph.dimensions]
            slots = np.concatenate(self.orig_maps)
            cols = np.concatenate(
                [np.full(m.shape[0], d, dtype=np.int64) for d, m in enumerate(self.orig_maps)]
            )
            data = np.concatenate(self.orig_values)
            self.orig_stacked = sp.csr_matrix(
                (data, (slots, cols)), shape=(self.union.nnz, graph.num_dims)
            )
            self.orig_stacked_t = self.orig_stacked.T.tocsr()
            if normalize:
                self.norm_plan = ad.NormalizePlan(self.union, dense_mode)
            else:
                self.raw_spmm = ad.SpmmPlan(
                    self.union.num_nodes,
                    self.union.indptr,
                    self.union.indices,
                    dense_mode,
                    symmetric_values=True,
                )


def param_leaves(params, train_alpha: bool = True):
    """Yield (name, array, weight_decay, trainable) in canonical order.

    Decay applies to GCN weights, attention V matrices, and the
    discriminator; alpha logits and attention y vectors are exempt. The
    order here defines the tape-parameter order everywhere (trainer,
    gradient checks), so keep it in sync with ``structure_from_leaves``.
    """
    if isinstance(params, HmgeParams):
        for l, layer in enumerate(params.layers):
            yield f"alpha_{l}", layer.alpha, False, train_alpha
            for d, w in enumerate(layer.gcn_w):
                yield f"w_{l}_{d}", w, True, True
            for d, v in enumerate(layer.attn_v):
                yield f"v_{l}_{d}", v, True, True
            for d, y in enumerate(layer.attn_y):
                yield f"y_{l}_{d}", y, False, True
        yield "final_w", params.final_w, True, True
        yield "disc_q", params.disc_q, True, True
    elif isinstance(params, LinearParams):
        for d, stack in enumerate(params.gcn_w):
            for k, w in enumerate(stack):
                yield f"w_{d}_{k}", w, True, True
        for d, v in enumerate(params.attn_v):
            yield f"v_{d}", v, True, True
        for d, y in enumerate(params.attn_y):
            yield f"y_{d}", y, False, True
        yield "disc_q", params.disc_q, True, True
    else:
        raise ConfigError(f"unknown parameter container {type(params).__name__}")


def structure_from_leaves(params, leaves):
    """Rebuild the node structure the forward builders expect from flat leaves."""
    it = iter(leaves)
    if isinstance(params, HmgeParams):
        layers = []
        for layer in params.layers:
            layers.append(
                {
                    "alpha": next(it),
                    "gcn_w": [next(it) for _ in layer.gcn_w],
                    "attn_v": [next(it) for _ in layer.attn_v],
                    "attn_y": [next(it) for _ in layer.attn_y],
                }
            )
        out = {"layers": layers, "final_w": next(it), "disc_q": next(it)}
    else:
        out = {
            "gcn_w": [[next(it) for _ in stack] for stack in params.gcn_w],
            "attn_v": [next(it) for _ in params.attn_v],
            "attn_y": [next(it) for _ in params.attn_y],
            "disc_q": next(it),
        }
    leftover = object()
    if next(it, leftover) is not leftover:
        raise ValueError("leaf count does not match the parameter template")
    return out


def lift_params(tape: ad.Tape, params, train_alpha: bool = True, constant: bool = False):
    """Register all parameter arrays on a tape and return the node structure."""
    nodes = []
    for name, arr, decay, trainable in param_leaves(params, train_alpha):
        if constant or not trainable:
            nodes.append(tape.constant(arr, name=name))
        else:
            nodes.append(tape.parameter(arr, weight_decay=decay, name=name))
    return structure_from_leaves(params, nodes)


def _is_identity(features: np.ndarray) -> bool:
    n, f = features.shape
    if n != f:
        return False
    if np.count_nonzero(features) != n:
        return False
    return bool(np.all(np.diagonal(features) == 1.0))


def _stack_attention(h_stack: ad.Node, v_nodes, y_nodes, mode: str):
    """Aggregate a (D, N, M) embedding stack; returns (H (N, M), beta (N, D))."""
    tape = h_stack.tape
    d_in, n, _ = h_stack.value.shape
    if mode == "sum":
        ones = tape.constant(np.ones((n, d_in)))
        return ad.mix_stack(h_stack, ones), None
    v_stack = ad.stack_matrices(v_nodes)
    y_stack = ad.transpose2d(ad.stack_columns(y_nodes))
    projected = ad.batched_matmul(h_stack, v_stack, transpose_b=True)
    scores = ad.tanh(ad.batched_matvec(projected, y_stack))
    beta = ad.row_normalize_signed(ad.transpose2d(scores), ATTENTION_GUARD)
    return ad.mix_stack(h_stack, beta), beta


def build_latent_structure(plan: EncodePlan, pnodes):
    """Phase-two chain: latent adjacency values plus their multiply-ready form.

    Latent structure depends only on the combination logits, so it is built
    once and shared by the clean and corrupted embedding passes. The first
    layer computes every combination in one sparse product over the stacked
    input values and normalizes all columns as one block.

    Returns (raw, gcn_ready) where raw[l][j] is the value vector of latent
    adjacency j from layer l+1 and gcn_ready[l][j] its (possibly
    normalized) counterpart fed to spmm_var.
    """
    schedule = plan.schedule
    act = plan.config.activation
    raw_layers: list[list[ad.Node]] = []
    gcn_layers: list[list[ad.Node]] = []
    current: list[ad.Node] | None = None
    for l in range(plan.config.num_layers):
        weights = ad.softmax_cols(pnodes["layers"][l]["alpha"])
        d_out = schedule[l + 1]
        block = None
        if l == 0:
            block = activate(
                ad.csr_combine_stack(weights, plan.orig_stacked, plan.orig_stacked_t),
                act,
            )
            cols = [ad.select_column(block, j) for j in range(d_out)]
        else:
            cols = []
            for j in range(d_out):
                w_col = ad.select_column(weights, j)
                combined = ad.csr_combine(
                    w_col, current, [None] * len(current), plan.union.nnz
                )
                cols.append(activate(combined, act))
        raw_layers.append(cols)
        if not plan.normalize:
            gcn_layers.append(cols)
        elif block is not None and d_out > 1:
            nblock = ad.csr_normalize(block, plan.norm_plan)
            gcn_layers.append([ad.select_column(nblock, j) for j in range(d_out)])
        else:
            gcn_layers.append([ad.csr_normalize(c, plan.norm_plan) for c in cols])
        current = cols
    return raw_layers, gcn_layers


def _first_layer_embed(plan, tape, gcn_w, d, h, perm, cached_prop, act):
    """One dimension's first GCN output for either feature mode."""
    if plan.identity_features:
        w = gcn_w[d]
        if perm is not None:
            w = ad.permute_rows(w, perm)
        return activate(ad.spmm(plan.orig_gcn[d], w), act)
    if cached_prop:
        prop = tape.constant(plan.orig_prop[d])
    else:
        prop = ad.spmm(plan.orig_gcn[d], h)
    return activate(ad.matmul(prop, gcn_w[d]), act)


def build_embedding_chain(plan: EncodePlan, pnodes, x_spec, latent_gcn, mode="learned"):
    """Phase-one chain for one feature input; returns (z, h per layer, beta per layer).

    ``x_spec`` is (feature node, corruption permutation); the node is None
    in identity-feature mode, where a permutation stands in for the
    shuffled one-hot features. ``latent_gcn[l][d]`` is the multiply-ready
    value node of latent adjacency d produced by layer l+1.
    """
    x_node, perm = x_spec
    cfg = plan.config
    act = cfg.activation
    spmm_plan = plan.norm_plan.spmm if plan.normalize else plan.raw_spmm
    tape = x_node.tape if x_node is not None else pnodes["disc_q"].tape
    cached_prop = (
        not plan.identity_features
        and x_node is not None
        and x_node.value is plan.features
    )
    n = plan.num_nodes
    h = x_node
    h_layers, betas = [], []
    for l in range(cfg.num_layers):
        layer = pnodes["layers"][l]
        d_in = plan.schedule[l]
        if d_in == 1:
            if l == 0:
                h = _first_layer_embed(
                    plan, tape, layer["gcn_w"], 0, h, perm, cached_prop, act
                )
            else:
                prop = ad.spmm_var(latent_gcn[l - 1][0], spmm_plan, h)
                h = activate(ad.matmul(prop, layer["gcn_w"][0]), act)
            beta = None if mode == "sum" else tape.constant(np.ones((n, 1)))
        else:
            if l == 0 and plan.identity_features:
                h_stack = ad.stack_matrices(
                    [
                        _first_layer_embed(
                            plan, tape, layer["gcn_w"], d, h, perm, cached_prop, act
                        )
                        for d in range(d_in)
                    ]
                )
            else:
                if l == 0 and cached_prop:
                    prop_stack = tape.constant(plan.orig_prop_stack)
                elif l == 0:
                    prop_stack = ad.stack_matrices(
                        [ad.spmm(plan.orig_gcn[d], h) for d in range(d_in)]
                    )
                else:
                    prop_stack = ad.stack_matrices(
                        [
                            ad.spmm_var(latent_gcn[l - 1][d], spmm_plan, h)
                            for d in range(d_in)
                        ]
                    )
                w_stack = ad.stack_matrices(layer["gcn_w"])
                h_stack = activate(ad.batched_matmul(prop_stack, w_stack), act)
            h, beta = _stack_attention(h_stack, layer["attn_v"], layer["attn_y"], mode)
        h_layers.append(h)
        betas.append(beta)
    # The embedding head is linear: clipping the output space measurably
    # discards class information, and the two-layer expansion of this
    # architecture is stated without a trailing non-linearity.
    prop = ad.spmm_var(latent_gcn[cfg.num_layers - 1][0], spmm_plan, h)
    z = ad.matmul(prop, pnodes["final_w"])
    return z, h_layers, betas


def build_hmge_forward(plan: EncodePlan, pnodes, x_specs, attention_mode="learned"):
    """Latent adjacencies once, then one embedding chain per feature input."""
    raw, latent_gcn = build_latent_structure(plan, pnodes)
    chains = [
        build_embedding_chain(plan, pnodes, spec, latent_gcn, attention_mode)
        for spec in x_specs
    ]
    return raw, chains


def build_linear_forward(plan: EncodePlan, pnodes, x_specs, attention_mode="learned"):
    """Per-dimension GCN stacks on the original graphs, one attention on top."""
    act = plan.config.activation
    num_dims = len(pnodes["gcn_w"])
    depth = len(pnodes["gcn_w"][0])
    chains = []
    for x_node, perm in x_specs:
        tape = x_node.tape if x_node is not None else pnodes["disc_q"].tape
        cached_prop = (
            not plan.identity_features
            and x_node is not None
            and x_node.value is plan.features
        )
        n = plan.num_nodes
        level0 = [
            _first_layer_embed(
                plan, tape, [s[0] for s in pnodes["gcn_w"]], d, x_node, perm,
                cached_prop, act,
            )
            for d in range(num_dims)
        ]
        if num_dims == 1:
            h = level0[0]
            for w in pnodes["gcn_w"][0][1:]:
                h = activate(ad.matmul(ad.spmm(plan.orig_gcn[0], h), w), act)
            beta = None if attention_mode == "sum" else tape.constant(np.ones((n, 1)))
            chains.append((h, [h], [beta]))
            continue
        h_stack = ad.stack_matrices(level0)
        for level in range(1, depth):
            prop_stack = ad.stack_matrices(
                [
                    ad.spmm(plan.orig_gcn[d], ad.select_matrix(h_stack, d))
                    for d in range(num_dims)
                ]
            )
            w_stack = ad.stack_matrices([stack[level] for stack in pnodes["gcn_w"]])
            h_stack = activate(ad.batched_matmul(prop_stack, w_stack), act)
        h, beta = _stack_attention(
            h_stack, pnodes["attn_v"], pnodes["attn_y"], attention_mode
        )
        chains.append((h, [h], [beta]))
    return chains


# ---------------------------------------------------------------------------
# public operations (eager)


def gcn_forward(h_prev: np.ndarray, a_norm, w: np.ndarray, activation="relu") -> np.ndarray:
    """One graph convolution: activation(A_norm @ H @ W)."""
    h_prev = np.asarray(h_prev, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if h_prev.ndim != 2 or w.ndim != 2 or h_prev.shape[1] != w.shape[0]:
        raise ValueError(f"gcn shape mismatch: {h_prev.shape} @ {w.shape}")
    if a_norm.num_nodes != h_prev.shape[0]:
        raise ValueError(
            f"gcn shape mismatch: {a_norm.num_nodes} nodes vs H {h_prev.shape}"
        )
    out = a_norm.matmul_dense(h_prev) @ w
    return np.maximum(out, 0.0) if activation == "relu" else out


def attention_aggregate(embeddings, attn_v, attn_y, guard: float = ATTENTION_GUARD):
    """Weight per-dimension embeddings by tanh attention scores.

    Returns (aggregated N x M matrix, attention weights N x D). Rows of the
    weights sum to 1, through the uniform fallback when the signed score sum
    is within ``guard`` of zero.
    """
    mats = [np.asarray(h, dtype=np.float64) for h in embeddings]
    if not mats:
        raise ValueError("attention needs at least one embedding matrix")
    n = mats[0].shape[0]
    d_in = len(mats)
    if d_in == 1:
        return mats[0].copy(), np.ones((n, 1))
    scores = np.empty((n, d_in))
    for d, (h, v, y) in enumerate(zip(mats, attn_v, attn_y)):
        scores[:, d] = np.tanh((h @ np.asarray(v).T) @ np.asarray(y))
    sums = scores.sum(axis=1, keepdims=True)
    floor = np.maximum(
        guard, np.abs(scores).max(axis=1, keepdims=True) / ad.AMPLIFICATION_BOUND
    )
    safe = np.abs(sums) >= floor
    beta = np.where(safe, scores / np.where(safe, sums, 1.0), ad.uniform_weights(d_in))
    agg = np.zeros_like(mats[0])
    for d, h in enumerate(mats):
        agg += beta[:, d][:, None] * h
    return agg, beta


def combine_adjacencies(
    adjacencies, alpha_logits: np.ndarray, activation: str = "relu"
) -> list[SparseAdjacency]:
    """Softmax-weighted sums of adjacency matrices on their union pattern."""
    adjacencies = list(adjacencies)
    logits = np.asarray(alpha_logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] != len(adjacencies):
        raise ValueError(
            f"alpha shape {logits.shape} does not match {len(adjacencies)} inputs"
        )
    weights = np.exp(logits - logits.max(axis=0, keepdims=True))
    weights /= weights.sum(axis=0, keepdims=True)
    union = ad.UnionPattern.union(adjacencies)
    maps = [union.position_map(a) for a in adjacencies]
    outs = []
    for j in range(logits.shape[1]):
        vals = np.zeros(union.nnz)
        for i, (a, m) in enumerate(zip(adjacencies, maps)):
            vals[m] += weights[i, j] * a.values
        if activation == "relu":
            vals = np.maximum(vals, 0.0)
        outs.append(union.to_adjacency(vals))
    return outs


def readout(z: np.ndarray) -> np.ndarray:
    """Graph summary: the mean of all node embeddings."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError("readout expects an N x M matrix")
    return z.mean(axis=0)


def discriminate(h: np.ndarray, s: np.ndarray, q: np.ndarray) -> float:
    """Probability that a patch/summary pair is genuine: sigmoid(h^T Q s)."""
    h = np.asarray(h, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (h.shape[0], s.shape[0]):
        raise ValueError(f"bilinear shape mismatch: {h.shape}, {q.shape}, {s.shape}")
    return float(ad.sigmoid_value(h @ q @ s))


# ---------------------------------------------------------------------------
# encode entry points


def encode(
    graph: MultiplexGraph,
    params,
    config: HmgeConfig,
    *,
    normalize: bool = True,
    attention_mode: str = "learned",
    dense_mode: bool | None = None,
    plan: EncodePlan | None = None,
) -> ForwardTrace:
    """Run the encoder and capture every intermediate product.

    With zero layers this degenerates to the linear-aggregation baseline at
    depth 1 (params must then be LinearParams).
    """
    if attention_mode not in ATTENTION_MODES:
        raise ConfigError(f"unknown attention mode {attention_mode!r}")
    if plan is None:
        plan = EncodePlan(graph, config, normalize=normalize, dense_mode=dense_mode)
    tape = ad.Tape()
    x = None if plan.identity_features else tape.constant(graph.features)
    if config.num_layers == 0:
        if not isinstance(params, LinearParams):
            raise ConfigError("zero-layer encode needs LinearParams")
        pnodes = lift_params(tape, params, constant=True)
        chains = build_linear_forward(plan, pnodes, [(x, None)], attention_mode)
        z_node, h_nodes, beta_nodes = chains[0]
        trace = ForwardTrace(
            latent_adjacencies=[],
            embeddings=[h.value for h in h_nodes],
            attention=[b.value if b is not None else None for b in beta_nodes],
            z=z_node.value,
            summary=readout(z_node.value),
        )
        tape.release()
        return trace
    if not isinstance(params, HmgeParams):
        raise ConfigError("hierarchical encode needs HmgeParams")
    pnodes = lift_params(tape, params, constant=True)
    latent, chains = build_hmge_forward(plan, pnodes, [(x, None)], attention_mode)
    z_node, h_nodes, beta_nodes = chains[0]
    z = z_node.value
    latent_mats = [
        [plan.union.to_adjacency(v.value) for v in layer] for layer in latent
    ]
    trace = ForwardTrace(
        latent_adjacencies=latent_mats,
        embeddings=[h.value for h in h_nodes],
        attention=[b.value if b is not None else None for b in beta_nodes],
        z=z,
        summary=readout(z),
    )
    tape.release()
    return trace


def linear_aggregation_encode(
    graph: MultiplexGraph,
    params: LinearParams,
    *,
    normalize: bool = True,
    attention_mode: str = "learned",
    activation: str = "relu",
) -> np.ndarray:
    """Embeddings of the linear-aggregation baseline (GCN stacks + attention)."""
    if attention_mode not in ATTENTION_MODES:
        raise ConfigError(f"unknown attention mode {attention_mode!r}")
    config = HmgeConfig(
        embed_size=params.disc_q.shape[0], num_layers=0, activation=activation
    )
    plan = EncodePlan(graph, config, normalize=normalize)
    tape = ad.Tape()
    x = None if plan.identity_features else tape.constant(graph.features)
    pnodes = lift_params(tape, params, constant=True)
    chains = build_linear_forward(plan, pnodes, [(x, None)], attention_mode)
    z = chains[0][0].value
    tape.release()
    return z


# ---------------------------------------------------------------------------
# exports and model files


def softmax_alpha(alpha_logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(alpha_logits, dtype=np.float64)
    w = np.exp(logits - logits.max(axis=0, keepdims=True))
    return w / w.sum(axis=0, keepdims=True)


def export_combination_weights(params: HmgeParams, out_dir) -> list[Path]:
    """Write softmax-normalized combination weights as alpha_l<k>.csv files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for l, layer in enumerate(params.layers):
        weights = softmax_alpha(layer.alpha)
        path = out / f"alpha_l{l}.csv"
        lines = [",".join(repr(float(x)) for x in row) for row in weights]
        path.write_text("\n".join(lines) + "\n")
        written.append(path)
    return written


def export_embeddings(z: np.ndarray, path) -> Path:
    path = Path(path)
    lines = [",".join(repr(float(x)) for x in row) for row in np.atleast_2d(z)]
    path.write_text("\n".join(lines) + "\n")
    return path


def save_model(path, config: HmgeConfig, params) -> None:
    """Versioned binary dump of a trained parameter set (npz container)."""
    arrays = {}
    if isinstance(params, HmgeParams):
        kind = "hmge"
        for l, layer in enumerate(params.layers):
            arrays[f"layer{l}_alpha"] = layer.alpha
            for d, w in enumerate(layer.gcn_w):
                arrays[f"layer{l}_w{d}"] = w
            for d, v in enumerate(layer.attn_v):
                arrays[f"layer{l}_v{d}"] = v
            for d, y in enumerate(layer.attn_y):
                arrays[f"layer{l}_y{d}"] = y
        arrays["final_w"] = params.final_w
        arrays["disc_q"] = params.disc_q
        dims = [len(layer.gcn_w) for layer in params.layers]
        extra = {"layer_dims": dims}
    elif isinstance(params, LinearParams):
        kind = "linear"
        for d, stack in enumerate(params.gcn_w):
            for k, w in enumerate(stack):
                arrays[f"w{d}_{k}"] = w
        for d, v in enumerate(params.attn_v):
            arrays[f"v{d}"] = v
        for d, y in enumerate(params.attn_y):
            arrays[f"y{d}"] = y
        arrays["disc_q"] = params.disc_q
        extra = {"num_dims": len(params.gcn_w), "depth": params.depth}
    else:
        raise ConfigError(f"cannot save parameters of type {type(params).__name__}")
    meta = {
        "format_version": MODEL_FORMAT_VERSION,
        "kind": kind,
        "config": {
            "embed_size": config.embed_size,
            "num_layers": config.num_layers,
            "dims_schedule": list(config.dims_schedule)
            if config.dims_schedule is not None
            else None,
            "activation": config.activation,
        },
        **extra,
    }
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.str_(json.dumps(meta)), **arrays)


def load_model(path):
    """Load a model file; returns (config, params)."""
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise DataFormatError(f"cannot read model file {path}: {exc}") from exc
    if "meta" not in archive:
        raise DataFormatError(f"{path} is not a model file (missing meta)")
    meta = json.loads(str(archive["meta"]))
    if meta.get("format_version") != MODEL_FORMAT_VERSION:
        raise DataFormatError(
            f"unsupported model format version {meta.get('format_version')}"
        )
    cfg = meta["config"]
    config = HmgeConfig(
        embed_size=cfg["embed_size"],
        num_layers=cfg["num_layers"],
        dims_schedule=tuple(cfg["dims_schedule"]) if cfg["dims_schedule"] else None,
        activation=cfg["activation"],
    )
    if meta["kind"] == "hmge":
        layers = []
        for l, d_in in enumerate(meta["layer_dims"]):
            layers.append(
                LayerParams(
                    alpha=archive[f"layer{l}_alpha"],
                    gcn_w=[archive[f"layer{l}_w{d}"] for d in range(d_in)],
                    attn_v=[archive[f"layer{l}_v{d}"] for d in range(d_in)],
                    attn_y=[archive[f"layer{l}_y{d}"] for d in range(d_in)],
                )
            )
        params = HmgeParams(layers, archive["final_w"], archive["disc_q"])
    elif meta["kind"] == "linear":
        num_dims, depth = meta["num_dims"], meta["depth"]
        params = LinearParams(
            gcn_w=[[archive[f"w{d}_{k}"] for k in range(depth)] for d in range(num_dims)],
            attn_v=[archive[f"v{d}"] for d in range(num_dims)],
            attn_y=[archive[f"y{d}"] for d in range(num_dims)],
            disc_q=archive["disc_q"],
        )
    else:
        raise DataFormatError(f"unknown model kind {meta['kind']!r}")
    return config, params
