"""Reverse-mode automatic differentiation over dense matrices and CSR-backed
sparse values.

A Tape records nodes in construction order; backward walks them strictly in
reverse, accumulating adjoints additively. All arithmetic is float64. Scalar
reductions use compensated summation so results do not depend on chunking.

Latent adjacency matrices live as value vectors tied to a fixed sparsity
pattern (UnionPattern). Both combination weights and the symmetric
normalization are differentiable along that path; plain ``spmm`` treats its
sparse operand as a constant.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import HmgeError, NumericError
from .multiplex import NormalizedAdjacency, SparseAdjacency

# Patterns at least this dense (and small enough) run on BLAS-backed dense
# kernels; the two code paths agree to ~1e-12 and are regression-tested.
DENSE_DENSITY_THRESHOLD = 0.05
DENSE_MAX_NODES = 2600


class Node:
    """One tape entry: a value, its producers, and a pullback closure."""

    __slots__ = (
        "tape",
        "value",
        "parents",
        "requires_grad",
        "is_parameter",
        "weight_decay",
        "name",
        "adjoint",
        "_backward",
        "_cache",
    )

    def __init__(self, tape, value, parents=(), backward=None, requires_grad=False,
                 is_parameter=False, weight_decay=False, name=None):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.requires_grad = requires_grad
        self.is_parameter = is_parameter
        self.weight_decay = weight_decay
        self.name = name
        self.adjoint = None
        self._backward = backward
        self._cache = None

    @property
    def shape(self):
        return self.value.shape

    def cache(self) -> dict:
        if self._cache is None:
            self._cache = {}
        return self._cache

    def __repr__(self):
        tag = self.name or ("param" if self.is_parameter else "node")
        return f"Node({tag}, shape={self.value.shape})"


class Tape:
    """Append-only computation record; confined to one logical thread."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.parameters: list[Node] = []
        self._backward_done = False

    def _add(self, value, parents=(), backward=None, name=None) -> Node:
        value = np.asarray(value, dtype=np.float64)
        requires = any(p.requires_grad for p in parents)
        node = Node(self, value, tuple(parents), backward, requires_grad=requires,
                    name=name)
        self.nodes.append(node)
        return node

    def constant(self, value, name=None) -> Node:
        node = Node(self, np.asarray(value, dtype=np.float64), name=name)
        self.nodes.append(node)
        return node

    def parameter(self, value, weight_decay=False, name=None) -> Node:
        node = Node(self, np.array(value, dtype=np.float64), requires_grad=True,
                    is_parameter=True, weight_decay=weight_decay, name=name)
        self.nodes.append(node)
        self.parameters.append(node)
        return node

    def backward(self, loss: Node) -> None:
        """Fill ``adjoint`` of every reachable node with d(loss)/d(node).

        Reverse insertion order guarantees every consumer of a node ran
        before the node itself, so intermediate adjoints and kernel caches
        are dropped as soon as they have been propagated (parameters keep
        theirs).
        """
        if self._backward_done:
            raise HmgeError("backward already ran on this tape; rebuild the forward pass")
        if loss.tape is not self:
            raise ValueError("loss node belongs to a different tape")
        if loss.value.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
        if not np.all(np.isfinite(loss.value)):
            raise NumericError("loss is not finite")
        self._backward_done = True
        loss.adjoint = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.adjoint is not None and node._backward is not None:
                node._backward(node.adjoint)
            if not node.is_parameter:
                node.adjoint = None
                node._cache = None

    def gradients(self) -> list[np.ndarray]:
        """Adjoints of all parameters, zeros where a parameter is unused."""
        return [
            p.adjoint if p.adjoint is not None else np.zeros_like(p.value)
            for p in self.parameters
        ]

    def release(self) -> None:
        """Break node reference cycles so large arrays free immediately.

        Values, adjoints, and closures all go; the tape is unusable after.
        """
        for node in self.nodes:
            node.parents = ()
            node._backward = None
            node._cache = None
            node.adjoint = None
            node.value = None
        self.nodes = []
        self.parameters = []


def _accum(node: Node, delta) -> None:
    if not node.requires_grad:
        return
    if node.adjoint is None:
        # Copy: delta may alias a child's adjoint that later mutates.
        node.adjoint = np.array(delta, dtype=np.float64)
        if node.adjoint.shape != node.value.shape:
            node.adjoint = np.broadcast_to(delta, node.value.shape).astype(np.float64)
    else:
        node.adjoint += delta


def _accum_owned(node: Node, delta: np.ndarray) -> None:
    """Accumulate a freshly allocated delta; takes ownership on first touch."""
    if not node.requires_grad:
        return
    if node.adjoint is None:
        node.adjoint = delta
    else:
        node.adjoint += delta


def _same_tape(*nodes: Node) -> Tape:
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise ValueError("operands belong to different tapes")
    return tape


# ---------------------------------------------------------------------------
# dense ops


def matmul(a: Node, b: Node, transpose_a: bool = False, transpose_b: bool = False) -> Node:
    tape = _same_tape(a, b)
    av, bv = a.value, b.value
    if bv.ndim == 1:
        if transpose_b:
            raise ValueError("cannot transpose a vector operand")
        left = av.T if transpose_a else av
        if left.ndim != 2 or left.shape[1] != bv.shape[0]:
            raise ValueError(f"matvec shape mismatch: {left.shape} @ {bv.shape}")

        def backward(g):
            if a.requires_grad:
                da = np.outer(g, bv)
                _accum_owned(a, da.T if transpose_a else da)
            if b.requires_grad:
                _accum_owned(b, left.T @ g)

        return tape._add(left @ bv, (a, b), backward, name="matvec")

    if av.ndim != 2 or bv.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    left = av.T if transpose_a else av
    right = bv.T if transpose_b else bv
    if left.shape[1] != right.shape[0]:
        raise ValueError(f"matmul shape mismatch: {left.shape} @ {right.shape}")

    def backward(g):
        if a.requires_grad:
            da = g @ right.T
            _accum_owned(a, da.T if transpose_a else da)
        if b.requires_grad:
            db = left.T @ g
            _accum_owned(b, db.T if transpose_b else db)

    return tape._add(left @ right, (a, b), backward, name="matmul")


def add(*nodes: Node) -> Node:
    if len(nodes) < 2:
        raise ValueError("add needs at least two operands")
    tape = _same_tape(*nodes)
    shape = nodes[0].value.shape
    for n in nodes[1:]:
        if n.value.shape != shape:
            raise ValueError(f"add shape mismatch: {shape} vs {n.value.shape}")
    value = nodes[0].value.copy()
    for n in nodes[1:]:
        value += n.value

    def backward(g):
        for n in nodes:
            _accum(n, g)

    return nodes[0].tape._add(value, nodes, backward, name="add")


def scale(a: Node, factor: float) -> Node:
    factor = float(factor)

    def backward(g):
        _accum_owned(a, g * factor)

    return a.tape._add(a.value * factor, (a,), backward, name="scale")


def elementwise_mul(a: Node, b: Node) -> Node:
    tape = _same_tape(a, b)
    if a.value.shape != b.value.shape:
        raise ValueError(f"elementwise_mul shape mismatch: {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accum_owned(a, g * b.value)
        if b.requires_grad:
            _accum_owned(b, g * a.value)

    return tape._add(a.value * b.value, (a, b), backward, name="mul")


def relu(a: Node) -> Node:
    # Subgradient at exactly zero is taken as zero.
    mask = a.value > 0.0

    def backward(g):
        _accum_owned(a, g * mask)

    return a.tape._add(np.where(mask, a.value, 0.0), (a,), backward, name="relu")


def tanh(a: Node) -> Node:
    t = np.tanh(a.value)

    def backward(g):
        _accum_owned(a, g * (1.0 - t * t))

    return a.tape._add(t, (a,), backward, name="tanh")


def sigmoid(a: Node) -> Node:
    s = sigmoid_value(a.value)

    def backward(g):
        _accum_owned(a, g * s * (1.0 - s))

    return a.tape._add(s, (a,), backward, name="sigmoid")


def sigmoid_value(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function (eager helper)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_op(a: Node, axis: int, name: str) -> Node:
    s = _softmax(a.value, axis)

    def backward(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        _accum_owned(a, s * (g - inner))

    return a.tape._add(s, (a,), backward, name=name)


def softmax_rows(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ValueError("softmax_rows expects a matrix")
    return _softmax_op(a, 1, "softmax_rows")


def softmax_cols(a: Node) -> Node:
    """Softmax down each column; columns of the result sum to one."""
    if a.value.ndim != 2:
        raise ValueError("softmax_cols expects a matrix")
    return _softmax_op(a, 0, "softmax_cols")


def softmax_vec(a: Node) -> Node:
    if a.value.ndim != 1:
        raise ValueError("softmax_vec expects a vector")
    return _softmax_op(a, 0, "softmax_vec")


AMPLIFICATION_BOUND = 10.0


def uniform_weights(width: int) -> np.ndarray:
    """1/width per entry, last entry compensated so the true sum is exactly 1."""
    row = np.full(width, 1.0 / width)
    row[-1] = 1.0 - (width - 1) * (1.0 / width)
    return row


def row_normalize_signed(a: Node, guard: float = 1e-6,
                         amplification: float = AMPLIFICATION_BOUND) -> Node:
    """Divide each row by its (signed) sum, as the attention step requires.

    Ill-conditioned rows fall back to uniform weights 1/D and pass no
    gradient. A row is ill-conditioned when its sum is within ``guard`` of
    zero or smaller than max|row|/``amplification``: dividing by a sum much
    smaller than the scores themselves would scale the weights by orders of
    magnitude (observed four orders at 41 dimensions), which drowns the
    aggregated signal. The surviving rows divide by the signed sum exactly,
    so their weights are bounded by ``amplification`` and still sum to 1.
    """
    if a.value.ndim != 2:
        raise ValueError("row_normalize_signed expects a matrix")
    width = a.value.shape[1]
    sums = a.value.sum(axis=1, keepdims=True)
    floor = np.maximum(guard, np.abs(a.value).max(axis=1, keepdims=True) / amplification)
    safe = np.abs(sums) >= floor
    denom = np.where(safe, sums, 1.0)
    out = np.where(safe, a.value / denom, uniform_weights(width))

    def backward(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        _accum_owned(a, np.where(safe, (g - inner) / denom, 0.0))

    return a.tape._add(out, (a,), backward, name="row_normalize")


def select_column(a: Node, col: int) -> Node:
    if a.value.ndim != 2 or not (0 <= col < a.value.shape[1]):
        raise ValueError(f"bad column {col} for shape {a.value.shape}")

    def backward(g):
        if a.requires_grad:
            if a.adjoint is None:
                a.adjoint = np.zeros_like(a.value)
            a.adjoint[:, col] += g

    return a.tape._add(a.value[:, col].copy(), (a,), backward, name="select_column")


def row_select(a: Node, row: int) -> Node:
    if a.value.ndim != 2 or not (0 <= row < a.value.shape[0]):
        raise ValueError(f"bad row {row} for shape {a.value.shape}")

    def backward(g):
        if a.requires_grad:
            if a.adjoint is None:
                a.adjoint = np.zeros_like(a.value)
            a.adjoint[row] += g

    return a.tape._add(a.value[row].copy(), (a,), backward, name="row_select")


def stack_columns(columns: Sequence[Node]) -> Node:
    if not columns:
        raise ValueError("stack_columns needs at least one column")
    tape = _same_tape(*columns)
    length = columns[0].value.shape
    for c in columns:
        if c.value.ndim != 1 or c.value.shape != length:
            raise ValueError("stack_columns expects equal-length vectors")
    value = np.stack([c.value for c in columns], axis=1)

    def backward(g):
        for k, c in enumerate(columns):
            _accum(c, g[:, k])

    return tape._add(value, tuple(columns), backward, name="stack_columns")


def scale_rows(a: Node, weights: Node) -> Node:
    """Multiply row i of ``a`` by ``weights[i]``."""
    tape = _same_tape(a, weights)
    if a.value.ndim != 2 or weights.value.shape != (a.value.shape[0],):
        raise ValueError(f"scale_rows shape mismatch: {a.shape} vs {weights.shape}")
    w = weights.value[:, None]

    def backward(g):
        if a.requires_grad:
            _accum_owned(a, g * w)
        if weights.requires_grad:
            _accum_owned(weights, (g * a.value).sum(axis=1))

    return tape._add(a.value * w, (a, weights), backward, name="scale_rows")


def mean_rows(a: Node) -> Node:
    """Column means: the readout that turns embeddings into a graph summary."""
    if a.value.ndim != 2:
        raise ValueError("mean_rows expects a matrix")
    n = a.value.shape[0]

    def backward(g):
        _accum(a, np.broadcast_to(g / n, a.value.shape))

    return a.tape._add(a.value.mean(axis=0), (a,), backward, name="mean_rows")


def permute_rows(a: Node, perm: np.ndarray) -> Node:
    """Reorder matrix rows by a fixed permutation."""
    if a.value.ndim != 2 or perm.shape != (a.value.shape[0],):
        raise ValueError(f"bad permutation for shape {a.value.shape}")

    def backward(g):
        if a.requires_grad:
            if a.adjoint is None:
                a.adjoint = np.zeros_like(a.value)
            # perm has unique indices, so fancy in-place add is safe
            a.adjoint[perm] += g

    return a.tape._add(a.value[perm], (a,), backward, name="permute_rows")


def stack_matrices(mats: Sequence[Node]) -> Node:
    """Stack D equally shaped matrices into a (D, N, M) block."""
    if not mats:
        raise ValueError("stack_matrices needs at least one matrix")
    tape = _same_tape(*mats)
    shape = mats[0].value.shape
    for m in mats:
        if m.value.shape != shape:
            raise ValueError("stack_matrices expects equal shapes")
    value = np.stack([m.value for m in mats], axis=0)

    def backward(g):
        for k, m in enumerate(mats):
            _accum(m, g[k])

    return tape._add(value, tuple(mats), backward, name="stack_matrices")


def select_matrix(stack: Node, index: int) -> Node:
    """Slice (D, N, M) -> (N, M) at the given leading index."""
    if stack.value.ndim != 3 or not (0 <= index < stack.value.shape[0]):
        raise ValueError(f"bad slice {index} for shape {stack.value.shape}")

    def backward(g):
        if stack.requires_grad:
            if stack.adjoint is None:
                stack.adjoint = np.zeros_like(stack.value)
            stack.adjoint[index] += g

    return stack.tape._add(stack.value[index].copy(), (stack,), backward, name="select_matrix")


def batched_matmul(a: Node, b: Node, transpose_b: bool = False) -> Node:
    """Per-block matrix product: (D, N, K) @ (D, K, M) -> (D, N, M)."""
    tape = _same_tape(a, b)
    av, bv = a.value, b.value
    if av.ndim != 3 or bv.ndim != 3 or av.shape[0] != bv.shape[0]:
        raise ValueError(f"batched_matmul expects stacked operands: {av.shape} @ {bv.shape}")
    right = np.swapaxes(bv, 1, 2) if transpose_b else bv
    if av.shape[2] != right.shape[1]:
        raise ValueError(f"batched_matmul shape mismatch: {av.shape} @ {bv.shape}")

    def backward(g):
        if a.requires_grad:
            _accum_owned(a, g @ np.swapaxes(right, 1, 2))
        if b.requires_grad:
            db = np.swapaxes(av, 1, 2) @ g
            _accum_owned(b, np.swapaxes(db, 1, 2) if transpose_b else db)

    return tape._add(av @ right, (a, b), backward, name="batched_matmul")


def batched_matvec(a: Node, y: Node) -> Node:
    """Per-block matrix-vector product: (D, N, M) x (D, M) -> (D, N)."""
    tape = _same_tape(a, y)
    av, yv = a.value, y.value
    if av.ndim != 3 or yv.ndim != 2 or av.shape[0] != yv.shape[0] or av.shape[2] != yv.shape[1]:
        raise ValueError(f"batched_matvec shape mismatch: {av.shape} x {yv.shape}")

    def backward(g):
        if a.requires_grad:
            _accum_owned(a, g[:, :, None] * yv[:, None, :])
        if y.requires_grad:
            _accum_owned(y, np.einsum("dnm,dn->dm", av, g))

    return tape._add(np.einsum("dnm,dm->dn", av, yv), (a, y), backward, name="batched_matvec")


def transpose2d(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ValueError("transpose2d expects a matrix")

    def backward(g):
        _accum(a, g.T)

    return a.tape._add(np.ascontiguousarray(a.value.T), (a,), backward, name="transpose")


def mix_stack(stack: Node, weights: Node) -> Node:
    """Attention mix: sum_d weights[n, d] * stack[d, n, :] -> (N, M)."""
    tape = _same_tape(stack, weights)
    sv, wv = stack.value, weights.value
    if sv.ndim != 3 or wv.ndim != 2 or wv.shape != (sv.shape[1], sv.shape[0]):
        raise ValueError(f"mix_stack shape mismatch: {sv.shape} vs {wv.shape}")

    def backward(g):
        if stack.requires_grad:
            _accum_owned(stack, wv.T[:, :, None] * g[None, :, :])
        if weights.requires_grad:
            _accum_owned(weights, np.einsum("dnm,nm->nd", sv, g))

    return tape._add(np.einsum("dnm,nd->nm", sv, wv), (stack, weights), backward, name="mix_stack")


def bilinear_form(z: Node, q: Node, s: Node) -> Node:
    """Scores z_i^T Q s for every row z_i; returns a vector of length N."""
    tape = _same_tape(z, q, s)
    zv, qv, sv = z.value, q.value, s.value
    if zv.ndim != 2 or qv.ndim != 2 or sv.ndim != 1:
        raise ValueError("bilinear_form expects (matrix, matrix, vector)")
    if qv.shape != (zv.shape[1], sv.shape[0]):
        raise ValueError(
            f"bilinear_form shape mismatch: {zv.shape}, {qv.shape}, {sv.shape}"
        )
    qs = qv @ sv

    def backward(g):
        if z.requires_grad:
            _accum_owned(z, np.outer(g, qs))
        if q.requires_grad:
            _accum_owned(q, np.outer(zv.T @ g, sv))
        if s.requires_grad:
            _accum_owned(s, qv.T @ (zv.T @ g))

    return tape._add(zv @ qs, (z, q, s), backward, name="bilinear_form")


def log_clamped(a: Node, low: float = 1e-12, high: float = 1.0 - 1e-12) -> Node:
    """log of the input clamped into [low, high]; clamped entries pass no gradient."""
    clipped = np.clip(a.value, low, high)
    inside = (a.value >= low) & (a.value <= high)

    def backward(g):
        _accum_owned(a, g * inside / clipped)

    return a.tape._add(np.log(clipped), (a,), backward, name="log")


def sum_all(a: Node) -> Node:
    # fsum: exactly rounded and independent of traversal order.
    total = math.fsum(a.value.ravel())

    def backward(g):
        _accum(a, np.broadcast_to(g, a.value.shape))

    return a.tape._add(np.asarray(total), (a,), backward, name="sum")


# ---------------------------------------------------------------------------
# sparse-pattern support


class UnionPattern:
    """Diagonal-free sparsity pattern shared by a family of value vectors."""

    def __init__(self, num_nodes: int, indptr: np.ndarray, indices: np.ndarray):
        self.num_nodes = int(num_nodes)
        self.indptr = np.ascontiguousarray(indptr, dtype=np.int64)
        self.indices = np.ascontiguousarray(indices, dtype=np.int64)
        self.rows = np.repeat(
            np.arange(self.num_nodes, dtype=np.int64), np.diff(self.indptr)
        )
        self.nnz = int(self.indices.shape[0])

    @classmethod
    def union(cls, adjacencies: Sequence[SparseAdjacency]) -> "UnionPattern":
        n = adjacencies[0].num_nodes
        acc = None
        for adj in adjacencies:
            if adj.num_nodes != n:
                raise ValueError("union over differently sized adjacencies")
            part = sp.csr_matrix(
                (np.ones(adj.nnz, dtype=np.float64), adj.indices, adj.indptr),
                shape=(n, n),
            )
            acc = part if acc is None else acc + part
        acc = acc.tocsr()
        acc.sort_indices()
        if np.any(acc.diagonal()):
            raise ValueError("union pattern unexpectedly contains diagonal entries")
        return cls(n, acc.indptr, acc.indices)

    def position_map(self, adj: SparseAdjacency) -> np.ndarray:
        """Slot in this pattern of every stored entry of ``adj`` (CSR order)."""
        # Canonical CSR order makes row*n + col globally sorted.
        own_keys = self.rows * self.num_nodes + self.indices
        adj_keys = adj.row_indices() * self.num_nodes + adj.indices
        pos = np.searchsorted(own_keys, adj_keys)
        if np.any(pos >= own_keys.shape[0]) or np.any(own_keys[pos] != adj_keys):
            raise ValueError("adjacency entry missing from union pattern")
        return pos

    def to_adjacency(self, values: np.ndarray) -> SparseAdjacency:
        return SparseAdjacency(self.num_nodes, self.indptr, self.indices, values)


def _transpose_permutation(n, indptr, indices) -> np.ndarray:
    """For a structurally symmetric CSR pattern, data index of each entry's mirror."""
    tagged = sp.csr_matrix(
        (np.arange(indices.shape[0], dtype=np.float64), indices, indptr), shape=(n, n)
    )
    t = tagged.T.tocsr()
    t.sort_indices()
    if not (np.array_equal(t.indptr, indptr) and np.array_equal(t.indices, indices)):
        raise ValueError("pattern is not structurally symmetric")
    return t.data.astype(np.int64)


class SpmmPlan:
    """Kernels for S @ H where S has fixed pattern and per-pass values.

    ``dense_mode`` scatters values into a dense matrix and runs BLAS; the
    sparse mode stays in CSR. Chosen automatically from pattern density
    unless forced.
    """

    _GRAD_CHUNK = 1 << 18

    def __init__(self, num_nodes, indptr, indices, dense_mode: bool | None = None,
                 symmetric_values: bool = False):
        self.num_nodes = int(num_nodes)
        self.indptr = indptr
        self.indices = indices
        self.rows = np.repeat(
            np.arange(self.num_nodes, dtype=np.int64), np.diff(indptr)
        )
        self.nnz = int(indices.shape[0])
        self.tperm = _transpose_permutation(self.num_nodes, indptr, indices)
        # Callers assert value symmetry (S == S^T exactly); skips a gather.
        self.symmetric_values = bool(symmetric_values)
        if dense_mode is None:
            density = self.nnz / float(self.num_nodes) ** 2
            dense_mode = (
                density >= DENSE_DENSITY_THRESHOLD
                and self.num_nodes <= DENSE_MAX_NODES
            )
        self.dense_mode = bool(dense_mode)

    def _dense(self, values: np.ndarray, cache: dict | None) -> np.ndarray:
        if cache is not None and "dense" in cache:
            return cache["dense"]
        mat = np.zeros((self.num_nodes, self.num_nodes))
        mat[self.rows, self.indices] = values
        if cache is not None:
            cache["dense"] = mat
        return mat

    def _csr(self, values: np.ndarray) -> sp.csr_matrix:
        n = self.num_nodes
        return sp.csr_matrix((values, self.indices, self.indptr), shape=(n, n))

    def matmul(self, values, dense, cache=None) -> np.ndarray:
        if self.dense_mode:
            return self._dense(values, cache) @ dense
        return self._csr(values) @ dense

    def matmul_transpose(self, values, dense, cache=None) -> np.ndarray:
        if self.dense_mode:
            return self._dense(values, cache).T @ dense
        if self.symmetric_values:
            return self._csr(values) @ dense
        return self._csr(values[self.tperm]) @ dense

    def grad_values(self, g: np.ndarray, h: np.ndarray) -> np.ndarray:
        """d(loss)/d(values) for out = S @ H given d(loss)/d(out) = g."""
        if self.dense_mode:
            return (g @ h.T)[self.rows, self.indices]
        out = np.empty(self.nnz)
        for lo in range(0, self.nnz, self._GRAD_CHUNK):
            hi = min(lo + self._GRAD_CHUNK, self.nnz)
            out[lo:hi] = np.einsum(
                "ek,ek->e", g[self.rows[lo:hi]], h[self.indices[lo:hi]]
            )
        return out


class NormalizePlan:
    """Differentiable D^{-1/2}(A + I)D^{-1/2} over a fixed diagonal-free pattern.

    Output values live on the pattern extended with the diagonal; ``spmm``
    is the matching multiply plan for that extended pattern.
    """

    def __init__(self, pattern: UnionPattern, dense_mode: bool | None = None):
        self.pattern = pattern
        n = pattern.num_nodes
        base = sp.csr_matrix(
            (np.ones(pattern.nnz), pattern.indices, pattern.indptr), shape=(n, n)
        )
        ext = (base + sp.identity(n, format="csr")).tocsr()
        ext.sort_indices()
        self.out_indptr = ext.indptr.astype(np.int64)
        self.out_indices = ext.indices.astype(np.int64)
        self.out_rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(self.out_indptr))
        self.out_nnz = int(self.out_indices.shape[0])
        if self.out_nnz != pattern.nnz + n:
            raise ValueError("pattern already contained diagonal entries")
        self.in2out = self._map_into(pattern)
        diag_mask = self.out_rows == self.out_indices
        self.diag_positions = np.flatnonzero(diag_mask)
        # Normalized values are exactly symmetric for symmetric inputs.
        self.spmm = SpmmPlan(
            n, self.out_indptr, self.out_indices, dense_mode, symmetric_values=True
        )

    def _map_into(self, pattern: UnionPattern) -> np.ndarray:
        n = pattern.num_nodes
        out_keys = self.out_rows * n + self.out_indices
        in_keys = pattern.rows * n + pattern.indices
        return np.searchsorted(out_keys, in_keys)

    def forward(self, values: np.ndarray):
        """Accepts (nnz,) or a column block (nnz, D); shapes carry through."""
        vhat = np.zeros((self.out_nnz,) + values.shape[1:])
        vhat[self.in2out] = values
        vhat[self.diag_positions] = 1.0
        deg = np.add.reduceat(vhat, self.out_indptr[:-1], axis=0)
        dinv = 1.0 / np.sqrt(deg)
        # dinv[r]*dinv[c] first keeps the output exactly symmetric.
        prod = dinv[self.out_rows] * dinv[self.out_indices]
        return vhat * prod, prod, deg

    def backward(self, g, out_values, prod, deg):
        q = g * out_values
        row_q = np.add.reduceat(q, self.out_indptr[:-1], axis=0)
        col_q = np.add.reduceat(q[self.spmm.tperm], self.out_indptr[:-1], axis=0)
        ddeg = -(row_q + col_q) / (2.0 * deg)
        return g[self.in2out] * prod[self.in2out] + ddeg[self.pattern.rows]


# ---------------------------------------------------------------------------
# sparse ops


def spmm(adj, h: Node) -> Node:
    """Constant sparse matrix times dense node; no gradient to the matrix."""
    mat = adj.matrix if isinstance(adj, NormalizedAdjacency) else adj
    if not isinstance(mat, SparseAdjacency):
        raise ValueError("spmm expects a SparseAdjacency or NormalizedAdjacency")
    if h.value.ndim != 2 or h.value.shape[0] != mat.num_nodes:
        raise ValueError(f"spmm shape mismatch: {mat.num_nodes} nodes vs {h.value.shape}")
    sc = mat.to_scipy()

    def backward(g):
        if h.requires_grad:
            _accum_owned(h, sc.T @ g)

    return h.tape._add(sc @ h.value, (h,), backward, name="spmm")


def csr_combine(weights: Node, inputs: Sequence, maps: Sequence, out_nnz: int) -> Node:
    """Weighted sum of sparse value vectors scattered into a shared pattern.

    ``inputs[i]`` is either a Node (trainable upstream values) or a plain
    ndarray (constant input adjacency values); ``maps[i]`` gives the slot of
    each of its entries in the output pattern, or None for identity.
    """
    inputs = list(inputs)
    maps = list(maps)
    if weights.value.ndim != 1 or weights.value.shape[0] != len(inputs):
        raise ValueError(
            f"need one weight per input: {weights.value.shape} vs {len(inputs)} inputs"
        )
    if len(maps) != len(inputs):
        raise ValueError("maps and inputs length mismatch")
    tape = weights.tape
    node_inputs = []
    vals_list = []
    for inp, m in zip(inputs, maps):
        if isinstance(inp, Node):
            if inp.tape is not tape:
                raise ValueError("operands belong to different tapes")
            node_inputs.append(inp)
            v = inp.value
        else:
            v = np.asarray(inp, dtype=np.float64)
        if v.ndim != 1 or (m is None and v.shape[0] != out_nnz) or (
            m is not None and v.shape[0] != m.shape[0]
        ):
            raise ValueError("combine input length does not match its map")
        vals_list.append(v)

    w = weights.value
    out = np.zeros(out_nnz)
    for wi, v, m in zip(w, vals_list, maps):
        if m is None:
            out += wi * v
        else:
            out[m] += wi * v

    def backward(g):
        if weights.requires_grad:
            dw = np.empty(len(inputs))
            for i, (v, m) in enumerate(zip(vals_list, maps)):
                gi = g if m is None else g[m]
                dw[i] = float(np.dot(v, gi))
            _accum_owned(weights, dw)
        for i, (inp, m) in enumerate(zip(inputs, maps)):
            if isinstance(inp, Node) and inp.requires_grad:
                gi = g if m is None else g[m]
                _accum_owned(inp, w[i] * gi)

    parents = (weights, *node_inputs)
    return tape._add(out, parents, backward, name="csr_combine")


def csr_combine_stack(weights: Node, stacked: sp.csr_matrix, stacked_t: sp.csr_matrix) -> Node:
    """All softmax-weighted combinations of constant inputs in one product.

    ``stacked`` holds the input adjacency values column-per-input on the
    union pattern (nnz x D_in); the result column j is the j-th combined
    value vector. ``stacked_t`` is the precomputed transpose for backward.
    """
    if weights.value.ndim != 2 or weights.value.shape[0] != stacked.shape[1]:
        raise ValueError(
            f"weights {weights.value.shape} do not match {stacked.shape[1]} stacked inputs"
        )

    def backward(g):
        if weights.requires_grad:
            _accum_owned(weights, stacked_t @ g)

    return weights.tape._add(
        stacked @ weights.value, (weights,), backward, name="csr_combine_stack"
    )


def csr_normalize(values: Node, plan: NormalizePlan) -> Node:
    """Symmetric normalization with self-loops along the trainable sparse path.

    Accepts one value vector (nnz,) or a block of columns (nnz, D) that are
    normalized independently.
    """
    if values.value.shape[0] != plan.pattern.nnz or values.value.ndim > 2:
        raise ValueError(
            f"normalize expects {plan.pattern.nnz} values, got {values.value.shape}"
        )
    out, prod, deg = plan.forward(values.value)

    def backward(g):
        if values.requires_grad:
            _accum_owned(values, plan.backward(g, out, prod, deg))

    return values.tape._add(out, (values,), backward, name="csr_normalize")


def spmm_var(values: Node, plan: SpmmPlan, h: Node) -> Node:
    """Sparse-times-dense where both the sparse values and H carry gradients."""
    tape = _same_tape(values, h)
    if values.value.shape != (plan.nnz,):
        raise ValueError(f"expected {plan.nnz} values, got {values.value.shape}")
    if h.value.ndim != 2 or h.value.shape[0] != plan.num_nodes:
        raise ValueError(f"spmm_var shape mismatch: {plan.num_nodes} vs {h.value.shape}")
    cache = values.cache()
    out = plan.matmul(values.value, h.value, cache)

    def backward(g):
        if h.requires_grad:
            _accum_owned(h, plan.matmul_transpose(values.value, g, cache))
        if values.requires_grad:
            _accum_owned(values, plan.grad_values(g, h.value))

    return tape._add(out, (values, h), backward, name="spmm_var")


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    build_loss: Callable[[Tape, list[Node]], Node],
    params: Sequence[np.ndarray],
    eps: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``build_loss`` must deterministically map (tape, parameter nodes) to a
    scalar loss node. Relative error uses max(|analytic|, |numeric|, 1e-8)
    as the denominator.
    """
    base = [np.array(p, dtype=np.float64) for p in params]

    def run(values):
        tape = Tape()
        nodes = [tape.parameter(v) for v in values]
        loss = build_loss(tape, nodes)
        return tape, nodes, loss

    tape, nodes, loss = run(base)
    if loss.value.size != 1:
        raise ValueError("grad_check needs a scalar loss")
    if not np.all(np.isfinite(loss.value)):
        raise NumericError("grad_check: loss is not finite")
    tape.backward(loss)
    analytic = [
        n.adjoint if n.adjoint is not None else np.zeros_like(n.value) for n in nodes
    ]
    tape.release()

    def loss_at(values) -> float:
        t, _, node = run(values)
        val = float(node.value)
        t.release()
        if not math.isfinite(val):
            raise NumericError("grad_check: perturbed loss is not finite")
        return val

    worst = 0.0
    for k, p in enumerate(base):
        flat = p.reshape(-1)
        for i in range(flat.shape[0]):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = loss_at(base)
            flat[i] = orig - eps
            f_minus = loss_at(base)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic[k].reshape(-1)[i])
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
