"""Unsupervised InfoMax training loop.

Each epoch shuffles the feature rows to fabricate negative samples, encodes
both the clean and corrupted graphs (they share the latent adjacency
structure), scores every node embedding against the clean summary with the
bilinear discriminator, and minimizes the mean binary cross-entropy with
Adam. Weight decay is decoupled and limited to the GCN/attention-V/
discriminator matrices. Early stopping watches the training loss itself;
the returned parameters are the best-loss snapshot.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .errors import ConfigError, NumericError
from .multiplex import MultiplexGraph

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2000
    learning_rate: float = 0.001
    weight_decay: float = 1e-5
    patience: int = 100
    rng_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.learning_rate <= 0.0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0.0:
            raise ConfigError(f"weight decay must be non-negative, got {self.weight_decay}")
        if not (1 <= self.patience <= self.epochs):
            raise ConfigError(
                f"patience must lie in [1, epochs], got {self.patience} vs {self.epochs}"
            )


class AdamState:
    """Adam moments for a fixed parameter list, with decoupled weight decay."""

    def __init__(self, params: list[np.ndarray]):
        self.first = [np.zeros_like(p) for p in params]
        self.second = [np.zeros_like(p) for p in params]
        self.step_count = 0

    def step(self, params, grads, learning_rate, weight_decay, decay_flags) -> None:
        if not (len(params) == len(grads) == len(self.first) == len(decay_flags)):
            raise ValueError("optimizer state does not match the parameter list")
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - ADAM_BETA1**t
        bias2 = 1.0 - ADAM_BETA2**t
        for p, g, m, v, decay in zip(params, grads, self.first, self.second, decay_flags):
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * (g * g)
            update = (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)
            if decay and weight_decay:
                update = update + weight_decay * p
            p -= learning_rate * update


def corrupt(graph: MultiplexGraph, rng: np.random.Generator) -> MultiplexGraph:
    """Negative-sample graph: same structure, feature rows uniformly permuted."""
    perm = rng.permutation(graph.num_nodes)
    return graph.with_features(graph.features[perm])


def infomax_loss(z, z_hat, s, q) -> float:
    """Mean binary cross-entropy of the discriminator over both sample sets.

    Positives are the clean embeddings (label 1), negatives the corrupted
    ones (label 0); log arguments are clamped to [1e-12, 1 - 1e-12].
    """
    z = np.asarray(z, dtype=np.float64)
    z_hat = np.asarray(z_hat, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if z.ndim != 2 or z_hat.shape != z.shape:
        raise ValueError(f"embedding shape mismatch: {z.shape} vs {z_hat.shape}")
    for arr in (z, z_hat, s, q):
        if not np.all(np.isfinite(arr)):
            raise NumericError("non-finite input to the InfoMax loss")
    qs = q @ s
    pos = ad.sigmoid_value(z @ qs)
    neg = ad.sigmoid_value(z_hat @ qs)
    log_pos = np.log(np.clip(pos, LOG_CLAMP, 1.0 - LOG_CLAMP))
    log_neg = np.log(np.clip(1.0 - neg, LOG_CLAMP, 1.0 - LOG_CLAMP))
    n = z.shape[0]
    return (math.fsum(log_pos) + math.fsum(log_neg)) * (-1.0 / (2.0 * n))


def build_loss_nodes(tape, plan, pnodes, features, perm, attention_mode="learned"):
    """Tape version of the training objective; returns (loss, z, z_hat, s)."""
    n = features.shape[0]
    if plan.identity_features:
        # One-hot features: the shuffled input is just a row permutation of
        # the first-layer weights, so no dense feature matrices are built.
        specs = [(None, None), (None, perm)]
    else:
        x = tape.constant(features)
        x_hat = tape.constant(features[perm])
        specs = [(x, None), (x_hat, None)]
    if "layers" in pnodes:
        _, chains = mdl.build_hmge_forward(plan, pnodes, specs, attention_mode)
    else:
        chains = mdl.build_linear_forward(plan, pnodes, specs, attention_mode)
    z, z_hat = chains[0][0], chains[1][0]
    s = ad.mean_rows(z)
    q = pnodes["disc_q"]
    pos = ad.sigmoid(ad.bilinear_form(z, q, s))
    neg = ad.sigmoid(ad.bilinear_form(z_hat, q, s))
    ones = tape.constant(np.ones(n))
    log_pos = ad.log_clamped(pos, LOG_CLAMP, 1.0 - LOG_CLAMP)
    log_neg = ad.log_clamped(ad.add(ones, ad.scale(neg, -1.0)), LOG_CLAMP, 1.0 - LOG_CLAMP)
    loss = ad.scale(
        ad.add(ad.sum_all(log_pos), ad.sum_all(log_neg)), -1.0 / (2.0 * n)
    )
    return loss, z, z_hat, s


def full_loss_builder(
    graph: MultiplexGraph,
    config: mdl.HmgeConfig,
    params,
    perm: np.ndarray,
    attention_mode: str = "learned",
    normalize: bool = True,
):
    """(build_loss, flat parameter copies) for grad_check over the whole model."""
    plan = mdl.EncodePlan(graph, config, normalize=normalize)
    arrays = [arr.copy() for _, arr, _, _ in mdl.param_leaves(params)]

    def build(tape, nodes):
        pnodes = mdl.structure_from_leaves(params, nodes)
        loss, *_ = build_loss_nodes(
            tape, plan, pnodes, graph.features, perm, attention_mode
        )
        return loss

    return build, arrays


@dataclass
class TrainResult:
    params: object
    embeddings: np.ndarray
    loss_history: list[float]
    best_epoch: int
    best_loss: float


def train(
    graph: MultiplexGraph,
    hmge_config: mdl.HmgeConfig,
    train_config: TrainConfig,
    *,
    params=None,
    train_alpha: bool = True,
    attention_mode: str = "learned",
    dense_mode: bool | None = None,
    log_path=None,
) -> TrainResult:
    """Run the InfoMax loop; returns best-loss parameters, embeddings, history.

    ``train_alpha=False`` freezes the combination logits (used by the
    uniform-weights ablation). A fresh parameter set is drawn from the seed
    unless ``params`` is supplied.
    """
    seed_init, seed_corrupt = np.random.SeedSequence(train_config.rng_seed).spawn(2)
    if params is None:
        params = mdl.init_params(
            hmge_config, graph.num_dims, graph.num_features,
            np.random.default_rng(seed_init),
        )
    else:
        params = params.copy()
    plan = mdl.EncodePlan(graph, hmge_config, dense_mode=dense_mode)
    corrupt_rng = np.random.default_rng(seed_corrupt)

    flat_refs = []
    decay_flags = []
    for _, arr, decay, trainable in mdl.param_leaves(params, train_alpha):
        if trainable:
            flat_refs.append(arr)
            decay_flags.append(decay)
    adam = AdamState(flat_refs)

    history: list[float] = []
    best_loss = math.inf
    best_epoch = -1
    best_params = params.copy()
    since_best = 0
    start = time.perf_counter()
    log_rows = []

    for epoch in range(train_config.epochs):
        perm = corrupt_rng.permutation(graph.num_nodes)
        tape = ad.Tape()
        pnodes = mdl.lift_params(tape, params, train_alpha=train_alpha)
        loss_node, *_ = build_loss_nodes(
            tape, plan, pnodes, graph.features, perm, attention_mode
        )
        loss = float(loss_node.value)
        if not math.isfinite(loss):
            raise NumericError(
                f"training aborted: non-finite loss {loss!r} at epoch {epoch} "
                f"(lr={train_config.learning_rate}, seed={train_config.rng_seed})"
            )
        history.append(loss)
        if loss < best_loss:
            best_loss = loss
            best_epoch = epoch
            best_params = params.copy()
            since_best = 0
        else:
            since_best += 1
        elapsed_ms = (time.perf_counter() - start) * 1000.0
        log_rows.append((epoch, loss, best_loss, elapsed_ms))
        if since_best >= train_config.patience:
            tape.release()
            break
        tape.backward(loss_node)
        adam.step(
            flat_refs,
            tape.gradients(),
            train_config.learning_rate,
            train_config.weight_decay,
            decay_flags,
        )
        tape.release()

    if log_path is not None:
        _write_train_log(log_path, log_rows)

    trace = mdl.encode(graph, best_params, hmge_config, plan=plan,
                       attention_mode=attention_mode)
    return TrainResult(
        params=best_params,
        embeddings=trace.z,
        loss_history=history,
        best_epoch=best_epoch,
        best_loss=best_loss,
    )


def _write_train_log(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "best_loss", "elapsed_ms"])
        for epoch, loss, best, ms in rows:
            writer.writerow([epoch, repr(loss), repr(best), f"{ms:.3f}"])
