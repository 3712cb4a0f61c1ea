"""Multiplex graph data model: CSR adjacency storage, symmetric normalization,
and the on-disk dataset directory format.

A multiplex graph is a set of D adjacency matrices (dimensions) over one node
set with a shared feature matrix. Input dimensions are undirected: edge lists
are symmetrized on load and every adjacency is kept symmetric with a zero
diagonal. Values are {0,1} at load time; matrices produced later by trainable
combinations hold arbitrary non-negative reals in the same CSR container.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DataFormatError

META_FILE = "meta.json"
FEATURES_FILE = "features.csv"
LABELS_FILE = "labels.csv"


def _frozen_array(a: np.ndarray, dtype) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=dtype)
    if out is a:
        out = out.copy()
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class SparseAdjacency:
    """Square CSR matrix: per-row sorted column indices, no duplicate entries.

    Immutable after construction; the backing arrays are marked read-only so
    instances can be shared freely across passes and threads.
    """

    num_nodes: int
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        n = self.num_nodes
        if n < 1:
            raise DataFormatError(f"adjacency needs at least one node, got {n}")
        indptr = _frozen_array(self.indptr, np.int64)
        indices = _frozen_array(self.indices, np.int64)
        values = _frozen_array(self.values, np.float64)
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "values", values)
        if indptr.shape != (n + 1,) or indptr[0] != 0 or indptr[-1] != indices.shape[0]:
            raise DataFormatError("malformed CSR indptr")
        if np.any(np.diff(indptr) < 0):
            raise DataFormatError("CSR indptr must be non-decreasing")
        if indices.shape != values.shape:
            raise DataFormatError("CSR indices and values length mismatch")
        if indices.size:
            if indices.min() < 0 or indices.max() >= n:
                raise DataFormatError("CSR column index out of range")
            # Sorted strictly increasing inside each row <=> sorted and no duplicates.
            row_start = np.zeros(indices.size, dtype=bool)
            boundaries = indptr[1:-1]
            row_start[boundaries[boundaries < indices.size]] = True
            interior = np.diff(indices) > 0
            if not np.all(interior | row_start[1:]):
                raise DataFormatError("CSR columns must be sorted and unique per row")
        if not np.all(np.isfinite(values)):
            raise DataFormatError("adjacency values must be finite")

    @property
    def nnz(self) -> int:
        return int(self.indices.shape[0])

    @property
    def num_edges(self) -> int:
        """Undirected edge count for a symmetric zero-diagonal matrix."""
        return self.nnz // 2

    @classmethod
    def from_undirected_edges(cls, num_nodes: int, u, v) -> "SparseAdjacency":
        """Build a binary symmetric adjacency from undirected edge endpoints.

        Both orientations are stored; duplicate edges collapse to a single
        entry. Self-loops are rejected (normalization adds them explicitly).
        """
        u = np.asarray(u, dtype=np.int64)
        v = np.asarray(v, dtype=np.int64)
        if u.shape != v.shape:
            raise DataFormatError("edge endpoint arrays differ in length")
        if u.size and (min(u.min(), v.min()) < 0 or max(u.max(), v.max()) >= num_nodes):
            raise DataFormatError(
                f"edge endpoint out of range for {num_nodes} nodes"
            )
        if np.any(u == v):
            raise DataFormatError("self-loops are not allowed in input graphs")
        rows = np.concatenate([u, v])
        cols = np.concatenate([v, u])
        mat = sp.csr_matrix(
            (np.ones(rows.size, dtype=np.float64), (rows, cols)),
            shape=(num_nodes, num_nodes),
        )
        mat.sum_duplicates()
        mat.sort_indices()
        mat.data[:] = 1.0
        return cls(num_nodes, mat.indptr, mat.indices, mat.data)

    @classmethod
    def from_dense(cls, mat) -> "SparseAdjacency":
        arr = np.asarray(mat, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise DataFormatError(f"dense adjacency must be square, got {arr.shape}")
        s = sp.csr_matrix(arr)
        s.sort_indices()
        return cls(arr.shape[0], s.indptr, s.indices, s.data)

    def to_scipy(self) -> sp.csr_matrix:
        n = self.num_nodes
        return sp.csr_matrix((self.values, self.indices, self.indptr), shape=(n, n))

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def with_values(self, values: np.ndarray) -> "SparseAdjacency":
        """Same sparsity pattern, new entry values."""
        return SparseAdjacency(self.num_nodes, self.indptr, self.indices, values)

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.to_scipy().sum(axis=1)).ravel()

    def row_indices(self) -> np.ndarray:
        """Row index of every stored entry, in CSR order."""
        return np.repeat(
            np.arange(self.num_nodes, dtype=np.int64), np.diff(self.indptr)
        )

    def is_symmetric(self) -> bool:
        m = self.to_scipy()
        diff = m - m.T
        return diff.nnz == 0 or float(np.abs(diff.data).max()) == 0.0

    def has_zero_diagonal(self) -> bool:
        return not np.any(self.to_scipy().diagonal())

    def is_binary(self) -> bool:
        return bool(np.all((self.values == 0.0) | (self.values == 1.0)))

    def undirected_pairs(self) -> np.ndarray:
        """All stored (u, v) pairs with u < v, as an array of shape (E, 2)."""
        rows = self.row_indices()
        mask = rows < self.indices
        return np.stack([rows[mask], self.indices[mask]], axis=1)

    def matmul_dense(self, dense: np.ndarray) -> np.ndarray:
        return self.to_scipy() @ dense

    def equals(self, other: "SparseAdjacency") -> bool:
        return (
            self.num_nodes == other.num_nodes
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True)
class NormalizedAdjacency:
    """D^{-1/2} (A + I) D^{-1/2} with D the degree matrix of A + I.

    Symmetric for symmetric A; entry (i, i) equals 1/deg(i); all stored
    values lie in (0, 1].
    """

    matrix: SparseAdjacency

    @property
    def num_nodes(self) -> int:
        return self.matrix.num_nodes

    def to_dense(self) -> np.ndarray:
        return self.matrix.to_dense()

    def matmul_dense(self, dense: np.ndarray) -> np.ndarray:
        return self.matrix.matmul_dense(dense)


def normalize_adjacency(adj: SparseAdjacency) -> NormalizedAdjacency:
    """Symmetrically normalize an adjacency matrix with an added self-loop.

    Every row of A + I has a positive sum because of the self-loop, so the
    operation is total on valid inputs. Values must be finite and
    non-negative.
    """
    if not np.all(np.isfinite(adj.values)):
        raise DataFormatError("cannot normalize: non-finite adjacency value")
    if adj.values.size and adj.values.min() < 0.0:
        raise DataFormatError("cannot normalize: negative adjacency value")
    n = adj.num_nodes
    ahat = (adj.to_scipy() + sp.identity(n, dtype=np.float64, format="csr")).tocsr()
    ahat.sort_indices()
    deg = np.asarray(ahat.sum(axis=1)).ravel()
    dinv = 1.0 / np.sqrt(deg)
    rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(ahat.indptr))
    # dinv[r] * dinv[c] first: commutative, so the result is exactly symmetric.
    vals = ahat.data * (dinv[rows] * dinv[ahat.indices])
    out = SparseAdjacency(n, ahat.indptr, ahat.indices, vals)
    return NormalizedAdjacency(out)


@dataclass(frozen=True)
class MultiplexGraph:
    """Node set shared across D adjacency dimensions plus one feature matrix.

    ``labels`` is optional; each node carries a tuple of class ids so that
    multilabel datasets fit the same container (single-label nodes hold a
    1-tuple).
    """

    num_nodes: int
    dimensions: tuple[SparseAdjacency, ...]
    features: np.ndarray
    labels: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        if self.num_nodes < 1:
            raise DataFormatError("graph needs at least one node")
        dims = tuple(self.dimensions)
        object.__setattr__(self, "dimensions", dims)
        if len(dims) < 1:
            raise DataFormatError("graph needs at least one dimension")
        for k, d in enumerate(dims):
            if d.num_nodes != self.num_nodes:
                raise DataFormatError(
                    f"dimension {k} has {d.num_nodes} nodes, expected {self.num_nodes}"
                )
        feats = _frozen_array(np.atleast_2d(self.features), np.float64)
        object.__setattr__(self, "features", feats)
        if feats.shape[0] != self.num_nodes or feats.shape[1] < 1:
            raise DataFormatError(
                f"feature matrix shape {feats.shape} does not match {self.num_nodes} nodes"
            )
        if not np.all(np.isfinite(feats)):
            raise DataFormatError("features must be finite")
        if self.labels is not None:
            labels = tuple(tuple(int(c) for c in row) for row in self.labels)
            object.__setattr__(self, "labels", labels)
            if len(labels) != self.num_nodes:
                raise DataFormatError("labels length does not match node count")

    @property
    def num_dims(self) -> int:
        return len(self.dimensions)

    @property
    def num_features(self) -> int:
        return int(self.features.shape[1])

    @property
    def max_edges(self) -> int:
        """Largest stored-entry count over the dimensions (cached)."""
        cached = self.__dict__.get("_max_edges")
        if cached is None:
            cached = max(d.nnz for d in self.dimensions)
            self.__dict__["_max_edges"] = cached
        return cached

    def with_features(self, features: np.ndarray) -> "MultiplexGraph":
        """New graph sharing all adjacency structure with replaced features."""
        return MultiplexGraph(self.num_nodes, self.dimensions, features, self.labels)

    def with_dimensions(self, dimensions) -> "MultiplexGraph":
        return MultiplexGraph(self.num_nodes, tuple(dimensions), self.features, self.labels)

    def validate_loaded(self) -> None:
        """Check the load-time invariants: binary, symmetric, zero diagonal."""
        for k, d in enumerate(self.dimensions):
            if not d.is_binary():
                raise DataFormatError(f"dimension {k} has non-binary values")
            if not d.has_zero_diagonal():
                raise DataFormatError(f"dimension {k} has a self-loop")
            if not d.is_symmetric():
                raise DataFormatError(f"dimension {k} is not symmetric")


def _format_float(x: float) -> str:
    # repr round-trips exactly through float(), keeping save/load bit-equal.
    return repr(float(x))


def save_multiplex(graph: MultiplexGraph, path) -> None:
    """Write a graph as a dataset directory (see load_multiplex for layout).

    The edge-list format is unweighted, so dimensions must be binary,
    symmetric, and diagonal-free; each undirected edge is written once.
    """
    graph.validate_loaded()
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
        meta = {
            "num_nodes": graph.num_nodes,
            "num_dims": graph.num_dims,
            "num_features": graph.num_features,
        }
        (root / META_FILE).write_text(json.dumps(meta, indent=2) + "\n")
        for k, dim in enumerate(graph.dimensions):
            pairs = dim.undirected_pairs()
            lines = [f"{u}\t{v}" for u, v in pairs]
            (root / f"dim_{k}.tsv").write_text("\n".join(lines) + ("\n" if lines else ""))
        feat_lines = [
            ",".join(_format_float(x) for x in row) for row in graph.features
        ]
        (root / FEATURES_FILE).write_text("\n".join(feat_lines) + "\n")
        if graph.labels is not None:
            label_lines = [";".join(str(c) for c in row) for row in graph.labels]
            (root / LABELS_FILE).write_text("\n".join(label_lines) + "\n")
    except OSError as exc:
        raise DataFormatError(f"cannot write dataset to {root}: {exc}") from exc


def load_multiplex(path) -> MultiplexGraph:
    """Load a dataset directory.

    Layout: ``meta.json`` with num_nodes/num_dims/num_features;
    ``dim_<k>.tsv`` (k = 0..D-1) with one ``u<TAB>v`` edge per line (0-based
    indices, symmetrized on load); ``features.csv`` with N rows of F
    comma-separated values; optional ``labels.csv`` with semicolon-separated
    class ids per node.
    """
    root = Path(path)
    meta_path = root / META_FILE
    if not meta_path.is_file():
        raise DataFormatError(f"missing {META_FILE} in {root}")
    try:
        meta = json.loads(meta_path.read_text())
        n = int(meta["num_nodes"])
        num_dims = int(meta["num_dims"])
        num_features = int(meta["num_features"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DataFormatError(f"malformed {META_FILE}: {exc}") from exc
    if n < 1 or num_dims < 1 or num_features < 1:
        raise DataFormatError(f"non-positive sizes in {META_FILE}")

    dims = []
    for k in range(num_dims):
        dim_path = root / f"dim_{k}.tsv"
        if not dim_path.is_file():
            raise DataFormatError(
                f"missing dim_{k}.tsv: header declares {num_dims} dimensions"
            )
        us, vs = [], []
        for ln, line in enumerate(dim_path.read_text().splitlines(), start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataFormatError(f"{dim_path.name}:{ln}: expected 'u<TAB>v'")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise DataFormatError(f"{dim_path.name}:{ln}: non-integer node id") from exc
            if not (0 <= u < n and 0 <= v < n):
                raise DataFormatError(
                    f"{dim_path.name}:{ln}: node index out of range [0, {n})"
                )
            if u == v:
                raise DataFormatError(f"{dim_path.name}:{ln}: self-loop not allowed")
            us.append(u)
            vs.append(v)
        dims.append(SparseAdjacency.from_undirected_edges(n, us, vs))

    extra = root / f"dim_{num_dims}.tsv"
    if extra.is_file():
        raise DataFormatError(
            f"found {extra.name} but header declares only {num_dims} dimensions"
        )

    feat_path = root / FEATURES_FILE
    if not feat_path.is_file():
        raise DataFormatError(f"missing {FEATURES_FILE} in {root}")
    rows = []
    for ln, line in enumerate(feat_path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = [float(x) for x in line.split(",")]
        except ValueError as exc:
            raise DataFormatError(f"{FEATURES_FILE}:{ln}: bad float") from exc
        if len(row) != num_features:
            raise DataFormatError(
                f"{FEATURES_FILE}:{ln}: expected {num_features} values, got {len(row)}"
            )
        rows.append(row)
    if len(rows) != n:
        raise DataFormatError(
            f"{FEATURES_FILE}: expected {n} rows, got {len(rows)}"
        )
    features = np.asarray(rows, dtype=np.float64)

    labels = None
    label_path = root / LABELS_FILE
    if label_path.is_file():
        label_rows = []
        for ln, line in enumerate(label_path.read_text().splitlines(), start=1):
            line = line.strip()
            if not line:
                raise DataFormatError(f"{LABELS_FILE}:{ln}: empty label row")
            try:
                label_rows.append(tuple(int(c) for c in line.split(";")))
            except ValueError as exc:
                raise DataFormatError(f"{LABELS_FILE}:{ln}: bad class id") from exc
        if len(label_rows) != n:
            raise DataFormatError(
                f"{LABELS_FILE}: expected {n} rows, got {len(label_rows)}"
            )
        labels = tuple(label_rows)

    graph = MultiplexGraph(n, tuple(dims), features, labels)
    graph.validate_loaded()
    return graph
