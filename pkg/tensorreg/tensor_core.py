"""
Dense tensor algebra
====================

Storage, reshapings and contractions for real tensors, plus the structured
matrices (Kronecker, Khatri-Rao, Hadamard, commutation, duplication) the
estimators are written with.

Conventions:
- Linear storage is first-mode-fastest, so vec(X) is a Fortran-order ravel and
  every reshape in this package uses order="F".
- Public functions take 1-based mode indices; the ndarray helpers at the bottom
  of the module (unfold, mode_apply, ...) are 0-based and work on stacked
  arrays whose axis 0 indexes observations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from itertools import product as iproduct
from typing import Sequence

import numpy as np
import scipy.linalg

from tensorreg.config import BUDGETS
from tensorreg.errors import BudgetExceededError, TensorShapeError

logger = logging.getLogger(__name__)


class DenseTensor:
    """Immutable p-mode real array.

    Args:
        data: Anything numpy can turn into a float64 array.
        dims: Optional mode sizes. When given, `data` is read in
            first-mode-fastest order and reshaped to `dims`.
    """

    __slots__ = ("_array",)

    def __init__(self, data, dims: Sequence[int] | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if dims is not None:
            dims = tuple(int(d) for d in dims)
            if any(d < 1 for d in dims):
                raise TensorShapeError(f"mode sizes must be >= 1, got {dims}")
            if arr.size != int(np.prod(dims)):
                raise TensorShapeError(
                    f"{arr.size} values cannot fill a tensor of dims {dims}"
                )
            arr = arr.ravel(order="F").reshape(dims, order="F")
        elif any(d < 1 for d in arr.shape):
            raise TensorShapeError(f"mode sizes must be >= 1, got {arr.shape}")
        arr = np.array(arr, dtype=np.float64, order="F", copy=True)
        arr.setflags(write=False)
        self._array = arr

    @classmethod
    def from_vec(cls, vec, dims):
        return cls(np.asarray(vec).ravel(), dims)

    @property
    def dims(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def order(self) -> int:
        return self._array.ndim

    @property
    def size(self) -> int:
        return self._array.size

    @property
    def array(self) -> np.ndarray:
        """Read-only ndarray view with shape `dims`."""
        return self._array

    @property
    def data(self) -> np.ndarray:
        """Read-only first-mode-fastest view of the values."""
        return self._array.ravel(order="F")

    def item(self) -> float:
        """Scalar accessor for order-0 (or single-entry) tensors."""
        if self._array.size != 1:
            raise TensorShapeError(f"tensor of dims {self.dims} is not a scalar")
        return float(self._array.reshape(-1)[0])

    def at(self, *index: int) -> float:
        """Element X(i1, ..., ip) with 1-based indices."""
        if len(index) != self.order:
            raise TensorShapeError(f"expected {self.order} indices, got {len(index)}")
        for k, (i, m) in enumerate(zip(index, self.dims), start=1):
            if not 1 <= i <= m:
                raise TensorShapeError(f"index {i} out of range for mode {k} of size {m}")
        return float(self._array[tuple(i - 1 for i in index)])

    def norm(self) -> float:
        return float(np.linalg.norm(self.data))

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._array
        return self._array.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, DenseTensor):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self._array, other._array)

    __hash__ = None

    def __add__(self, other):
        return DenseTensor(self._array + _as_array(other))

    def __sub__(self, other):
        return DenseTensor(self._array - _as_array(other))

    def __mul__(self, scalar):
        return DenseTensor(self._array * float(scalar))

    __rmul__ = __mul__

    def __neg__(self):
        return DenseTensor(-self._array)

    def __repr__(self):
        return f"DenseTensor(dims={self.dims})"


def _as_array(x) -> np.ndarray:
    if isinstance(x, DenseTensor):
        return x.array
    return np.asarray(x, dtype=np.float64)


def as_tensor(x) -> DenseTensor:
    return x if isinstance(x, DenseTensor) else DenseTensor(x)


def _check_mode(k: int, p: int, name: str = "mode") -> int:
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= p:
        raise TensorShapeError(f"{name} index {k} out of range 1..{p}")
    return int(k) - 1


@dataclass(frozen=True)
class ModePartition:
    """Ordered row and column mode groups (1-based) of a matricization."""

    row_modes: tuple[int, ...]
    col_modes: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "row_modes", tuple(int(k) for k in self.row_modes))
        object.__setattr__(self, "col_modes", tuple(int(k) for k in self.col_modes))

    def validate(self, p: int) -> None:
        modes = self.row_modes + self.col_modes
        if sorted(modes) != list(range(1, p + 1)):
            raise TensorShapeError(
                f"partition {self.row_modes} | {self.col_modes} does not cover modes 1..{p} exactly once"
            )


# ==============================================================================
# RESHAPINGS
# ==============================================================================

def vec(x) -> np.ndarray:
    return _as_array(x).ravel(order="F")


def matricize_mode(x, k: int) -> np.ndarray:
    """Mode-k matricization X_(k), remaining modes first-fastest in the columns."""
    arr = _as_array(x)
    j = _check_mode(k, arr.ndim)
    return unfold(arr, j)


def matricize_canonical(x, k: int) -> np.ndarray:
    """Canonical matricization X_<k>: modes 1..k index the rows."""
    arr = _as_array(x)
    if not 0 <= k <= arr.ndim:
        raise TensorShapeError(f"split point {k} out of range 0..{arr.ndim}")
    rows = int(np.prod(arr.shape[:k]))
    return arr.reshape((rows, -1), order="F")


def matricize_general(x, part: ModePartition) -> np.ndarray:
    arr = _as_array(x)
    part.validate(arr.ndim)
    rows = [k - 1 for k in part.row_modes]
    cols = [k - 1 for k in part.col_modes]
    nrow = int(np.prod([arr.shape[k] for k in rows]))
    return np.transpose(arr, rows + cols).reshape((nrow, -1), order="F")


def matricization_permutation(dims, row_modes, col_modes) -> np.ndarray:
    """Index map of a matricization: vec(X_(S x T)) == vec(X)[perm].

    This is the permutation view of the commutation matrices (K_(k) is the
    permutation matrix of `matricization_permutation(dims, [k], rest)`).
    """
    dims = tuple(int(d) for d in dims)
    idx = np.arange(int(np.prod(dims))).reshape(dims, order="F")
    part = ModePartition(tuple(row_modes), tuple(col_modes))
    return matricize_general(idx, part).ravel(order="F").astype(np.int64)


# ==============================================================================
# CONTRACTIONS
# ==============================================================================

def contract(x, modes_x: Sequence[int], y, modes_y: Sequence[int]) -> DenseTensor:
    """Contract the listed modes of x with the listed modes of y.

    Surviving x-modes come first, then surviving y-modes, each in their
    original order. A full contraction returns an order-0 tensor.
    """
    a, b = _as_array(x), _as_array(y)
    if len(modes_x) != len(modes_y):
        raise TensorShapeError("contracted mode lists must have equal length")
    if len(set(modes_x)) != len(modes_x) or len(set(modes_y)) != len(modes_y):
        raise TensorShapeError("repeated mode in contraction")
    ax = [_check_mode(k, a.ndim) for k in modes_x]
    ay = [_check_mode(k, b.ndim) for k in modes_y]
    for i, j in zip(ax, ay):
        if a.shape[i] != b.shape[j]:
            raise TensorShapeError(
                f"cannot contract mode {i + 1} (size {a.shape[i]}) with mode {j + 1} (size {b.shape[j]})"
            )
    return DenseTensor(np.tensordot(a, b, axes=(ax, ay)))


def inner(x, y) -> float:
    """<x, y> = vec(x)'vec(y)."""
    a, b = _as_array(x), _as_array(y)
    if a.shape != b.shape:
        raise TensorShapeError(f"inner product of dims {a.shape} and {b.shape}")
    return float(np.vdot(a, b))


def partial_contraction(x, b) -> DenseTensor:
    """<x|b>: contract all modes of x with the leading modes of b."""
    xa, ba = _as_array(x), _as_array(b)
    p = xa.ndim
    if p >= ba.ndim or ba.shape[:p] != xa.shape:
        raise TensorShapeError(
            f"partial contraction needs b dims to start with {xa.shape} and keep a mode, got {ba.shape}"
        )
    axes = list(range(p))
    return DenseTensor(np.tensordot(xa, ba, axes=(axes, axes)))


def tensor_trace(x) -> DenseTensor:
    """Self-contraction of the first and last modes."""
    arr = _as_array(x)
    if arr.ndim < 2 or arr.shape[0] != arr.shape[-1]:
        raise TensorShapeError(f"trace needs equal first and last modes, got dims {arr.shape}")
    return DenseTensor(np.trace(arr, axis1=0, axis2=arr.ndim - 1))


def tucker_product(x, factors: Sequence[np.ndarray]) -> DenseTensor:
    """[[x; A_1, ..., A_p]], vec(out) = (A_p kron ... kron A_1) vec(x)."""
    arr = _as_array(x)
    if len(factors) != arr.ndim:
        raise TensorShapeError(f"expected {arr.ndim} factors, got {len(factors)}")
    mats = [np.asarray(a, dtype=np.float64) for a in factors]
    for k, a in enumerate(mats):
        if a.ndim != 2 or a.shape[1] != arr.shape[k]:
            raise TensorShapeError(
                f"factor {k + 1} has shape {a.shape}, needs {arr.shape[k]} columns"
            )
    return DenseTensor(multi_mode_apply(arr, mats, range(arr.ndim)))


def last_first_contract(x, y) -> DenseTensor:
    """x x^1 y: last mode of x with first mode of y."""
    return contract(x, [_as_array(x).ndim], y, [1])


def mode_k_matrix_product(x, a, k: int) -> DenseTensor:
    """x x_k A; the new mode stays in position k."""
    arr = _as_array(x)
    j = _check_mode(k, arr.ndim)
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != arr.shape[j]:
        raise TensorShapeError(f"matrix of shape {a.shape} cannot multiply mode {k} of size {arr.shape[j]}")
    return DenseTensor(mode_apply(arr, a, j))


def mode_k_vector_product(x, v, k: int) -> DenseTensor:
    """x x_k v; mode k is removed."""
    arr = _as_array(x)
    j = _check_mode(k, arr.ndim)
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size != arr.shape[j]:
        raise TensorShapeError(f"vector of length {v.size} cannot multiply mode {k} of size {arr.shape[j]}")
    return DenseTensor(np.tensordot(arr, v, axes=([j], [0])))


# ==============================================================================
# STRUCTURED MATRICES
# ==============================================================================

def kronecker(a, b) -> np.ndarray:
    return np.kron(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))


def kronecker_all(mats: Sequence[np.ndarray]) -> np.ndarray:
    """M_1 kron M_2 kron ... in the order given."""
    out = np.ones((1, 1))
    for m in mats:
        out = np.kron(out, np.atleast_2d(m))
    return out


def khatri_rao(a, b) -> np.ndarray:
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    if a.shape[1] != b.shape[1]:
        raise TensorShapeError(f"Khatri-Rao needs equal column counts, got {a.shape} and {b.shape}")
    return scipy.linalg.khatri_rao(a, b)


def khatri_rao_all(mats: Sequence[np.ndarray]) -> np.ndarray:
    out = np.atleast_2d(mats[0])
    for m in mats[1:]:
        out = khatri_rao(out, m)
    return out


def hadamard(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise TensorShapeError(f"Hadamard product of shapes {a.shape} and {b.shape}")
    return a * b


def _guard_explicit(n: int, what: str) -> None:
    limit = BUDGETS["explicit_matrix"]
    if n > limit:
        raise BudgetExceededError(f"{what} of side {n} exceeds the explicit-matrix limit {limit}")


def commutation_matrix(m: int, n: int) -> np.ndarray:
    """K_{m,n} with K vec(A) = vec(A') for A of shape m x n."""
    _guard_explicit(m * n, "commutation matrix")
    perm = np.arange(m * n).reshape((m, n), order="F").ravel(order="C")
    return np.eye(m * n)[perm]


def big_commutation(k: int, dims: Sequence[int]) -> np.ndarray:
    """K_(k) = I_{prod_{i>k} m_i} kron K_{prod_{i<k} m_i, m_k}, so vec X_(k) = K_(k) vec X."""
    dims = tuple(int(d) for d in dims)
    j = _check_mode(k, len(dims))
    _guard_explicit(int(np.prod(dims)), "commutation matrix")
    before = int(np.prod(dims[:j]))
    after = int(np.prod(dims[j + 1:]))
    return np.kron(np.eye(after), commutation_matrix(before, dims[j]))


def vech(s) -> np.ndarray:
    """Lower triangle of a square matrix, stacked column by column."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise TensorShapeError(f"vech needs a square matrix, got {s.shape}")
    rows, cols = np.triu_indices(s.shape[0])
    # (cols, rows) walks the lower triangle column-major
    return s[cols, rows]


def duplication_matrix(n: int) -> np.ndarray:
    """D_n with D_n vech(S) = vec(S) for symmetric S."""
    _guard_explicit(n * n, "duplication matrix")
    d = np.zeros((n * n, n * (n + 1) // 2))
    col = 0
    for j in range(n):
        for i in range(j, n):
            d[i + n * j, col] = 1.0
            d[j + n * i, col] = 1.0
            col += 1
    return d


def diagonal_tensor(r: int, p: int) -> DenseTensor:
    """Order-p tensor with ones where all indices coincide."""
    if r < 1 or p < 0:
        raise TensorShapeError(f"diagonal tensor needs r >= 1 and p >= 0, got r={r}, p={p}")
    arr = np.zeros((r,) * p)
    for i in range(r):
        arr[(i,) * p] = 1.0
    return DenseTensor(arr)


def outer_product(*arrays) -> DenseTensor:
    """Outer product of vectors, or the OP outer product of matrices.

    For matrices M_q of shape m_q x h_q the result has dims
    (h_1..h_p, m_1..m_p) with entry prod_q M_q[i_q, j_q].
    """
    if len(arrays) == 1 and isinstance(arrays[0], (list, tuple)):
        arrays = tuple(arrays[0])
    mats = [np.asarray(a, dtype=np.float64) for a in arrays]
    if not mats:
        raise TensorShapeError("outer product of nothing")
    if all(m.ndim == 1 for m in mats):
        operands = []
        for q, v in enumerate(mats):
            operands += [v, [q]]
        return DenseTensor(np.einsum(*operands, list(range(len(mats)))))
    if all(m.ndim == 2 for m in mats):
        p = len(mats)
        operands = []
        for q, m in enumerate(mats):
            operands += [m, [p + q, q]]
        return DenseTensor(np.einsum(*operands, list(range(2 * p))))
    raise TensorShapeError("outer product needs all vectors or all matrices")


def unit_vector(n: int, i: int) -> np.ndarray:
    """e_i^n with a 1-based position."""
    e = np.zeros(n)
    e[i - 1] = 1.0
    return e


def naive_contract(a: np.ndarray, ax: Sequence[int], b: np.ndarray, ay: Sequence[int]) -> np.ndarray:
    """Nested-loop reference contraction (0-based axes), small tensors only."""
    free_a = [k for k in range(a.ndim) if k not in ax]
    free_b = [k for k in range(b.ndim) if k not in ay]
    out_shape = tuple(a.shape[k] for k in free_a) + tuple(b.shape[k] for k in free_b)
    out = np.zeros(out_shape)
    summed = [range(a.shape[k]) for k in ax]
    for fa in iproduct(*[range(a.shape[k]) for k in free_a]):
        for fb in iproduct(*[range(b.shape[k]) for k in free_b]):
            total = 0.0
            for s in iproduct(*summed):
                ia, ib = [0] * a.ndim, [0] * b.ndim
                for k, v in zip(free_a, fa):
                    ia[k] = v
                for k, v in zip(ax, s):
                    ia[k] = v
                for k, v in zip(free_b, fb):
                    ib[k] = v
                for k, v in zip(ay, s):
                    ib[k] = v
                total += a[tuple(ia)] * b[tuple(ib)]
            out[fa + fb] = total
    return out


# ==============================================================================
# NDARRAY HELPERS (0-based, used by the estimators)
# ==============================================================================

def unfold(arr: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(arr, axis, 0).reshape((arr.shape[axis], -1), order="F")


def fold(mat: np.ndarray, axis: int, shape: Sequence[int]) -> np.ndarray:
    shape = tuple(shape)
    moved = (shape[axis],) + shape[:axis] + shape[axis + 1:]
    return np.moveaxis(mat.reshape(moved, order="F"), 0, axis)


def mode_apply(arr: np.ndarray, mat: np.ndarray, axis: int) -> np.ndarray:
    """Multiply `axis` of `arr` by `mat` from the left, keeping the axis position."""
    out = np.tensordot(mat, arr, axes=([1], [axis]))
    return np.moveaxis(out, 0, axis)


def multi_mode_apply(arr: np.ndarray, mats, axes) -> np.ndarray:
    """Apply each matrix to its axis, largest input axis first."""
    pairs = [(ax, m) for ax, m in zip(axes, mats) if m is not None]
    pairs.sort(key=lambda t: -arr.shape[t[0]])
    for ax, m in pairs:
        arr = mode_apply(arr, m, ax)
    return arr


def flatten_trailing(arr: np.ndarray, lead: int) -> np.ndarray:
    """Merge axes lead.. into one, first of them fastest."""
    nd = arr.ndim
    perm = list(range(lead)) + list(range(nd - 1, lead - 1, -1))
    return np.transpose(arr, perm).reshape(arr.shape[:lead] + (-1,))


def chain_cores(cores: Sequence[np.ndarray], budget: int | None = None) -> np.ndarray:
    """Last-first contraction of order-3 cores, no closing trace.

    Returns an array of shape (g_0, d_1, ..., d_q, g_q); an empty chain is not
    allowed.
    """
    budget = BUDGETS["dense_elements"] if budget is None else budget
    out = cores[0]
    for core in cores[1:]:
        size = out.size // out.shape[-1] * core.shape[1] * core.shape[2]
        if size > budget:
            raise BudgetExceededError(f"ring chain intermediate of {size} elements exceeds budget {budget}")
        out = np.tensordot(out, core, axes=([out.ndim - 1], [0]))
    return out
