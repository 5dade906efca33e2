"""Dense linear-algebra kernel.

Thin, validated wrappers over numpy/LAPACK: minimum-norm least squares,
SVD with a fixed rank convention, and a lower-triangular container that
refuses writes above the diagonal. Both the staleness matrix W and the
momentum matrix M are stored in :class:`LowerTriangular`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack, solve_triangular

from .errors import ContractViolation, InvalidInput, InvalidParameter, NumericalFailure
from .tolerances import TOL


def matrix_hash(a: np.ndarray) -> str:
    """SHA-256 of the shape and raw float64 bytes of ``a``."""
    arr = np.ascontiguousarray(a, dtype=np.float64)
    h = hashlib.sha256(repr(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a finite 2-D float64 array or raise."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractViolation(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name} contains non-finite entries")
    return arr


def as_vector(v, name: str = "vector") -> np.ndarray:
    """Return ``v`` as a finite 1-D float64 array or raise."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ContractViolation(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name} contains non-finite entries")
    return arr


def rank_threshold(s_max: float, shape: tuple[int, int], rtol: float = TOL.svd_rtol) -> float:
    """Absolute cutoff below which singular values are treated as zero."""
    return rtol * float(s_max) * max(shape)


def least_squares_min_norm(a, b, rtol: float = TOL.svd_rtol) -> np.ndarray:
    """Minimum-norm minimiser of ``||x^T A - b^T||``.

    The row-vector form matches how momentum coefficients act on W:
    ``x`` weights the rows of ``A`` (shape ``m x n``) and ``b`` has length
    ``n``. Singular values at or below ``rtol * s_max * max(m, n)`` are
    discarded, which yields the pseudoinverse solution ``b^T A^+``.

    Args:
        a: Matrix of shape ``(m, n)``.
        b: Target vector of length ``n``.
        rtol: Relative rank tolerance.

    Returns:
        Vector of length ``m``.
    """
    a = as_matrix(a, "A")
    b = as_vector(b, "b")
    m, n = a.shape
    if n < 1:
        raise ContractViolation("A must have at least one column")
    if b.shape[0] != n:
        raise ContractViolation(f"b has length {b.shape[0]}, expected {n}")
    if m == 0:
        return np.zeros(0)
    try:
        x, *_ = np.linalg.lstsq(a.T, b, rcond=rtol * max(m, n))
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"least squares did not converge: {exc}", matrix_hash(a)) from exc
    return x


def lower_triangular_min_norm(a, b, rtol: float = TOL.svd_rtol) -> np.ndarray:
    """:func:`least_squares_min_norm` for square, usually lower-triangular ``a``.

    When the diagonal has no zeros and the LAPACK condition estimate is
    comfortably small, the system ``a^T x = b`` has a unique solution and
    is solved by substitution in O(n^2). Otherwise falls back to the SVD
    route, so the result is always the pseudoinverse solution.
    """
    a = as_matrix(a, "A")
    n = a.shape[0]
    if a.shape != (n, n):
        raise ContractViolation(f"A must be square, got {a.shape}")
    if n and np.all(np.diagonal(a) != 0.0) and not np.any(np.triu(a, 1)):
        rcond, info = lapack.dtrcon(a, norm="1", uplo="L", diag="N")
        if info == 0 and rcond >= TOL.triangular_rcond:
            b = as_vector(b, "b")
            if b.shape[0] != n:
                raise ContractViolation(f"b has length {b.shape[0]}, expected {n}")
            return solve_triangular(a, b, trans="T", lower=True, check_finite=False)
    return least_squares_min_norm(a, b, rtol)


@dataclass(frozen=True)
class SvdFactorization:
    """Thin SVD ``A = U diag(s) V^T`` with its numerical rank.

    Attributes:
        u: Left singular vectors, shape ``(rows, k)``.
        s: Singular values in non-increasing order, length ``k``.
        vt: Right singular vectors as rows, shape ``(k, cols)``.
        rank: Number of singular values above ``tol``.
        tol: Absolute threshold used for the rank.
    """

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray
    rank: int
    tol: float

    @property
    def row_space_basis(self) -> np.ndarray:
        """Orthonormal basis (as columns) of the row space of A."""
        return self.vt[: self.rank].T

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.vt


def numerical_rank(s: np.ndarray, shape: tuple[int, int], rtol: float = TOL.svd_rtol) -> int:
    """Count singular values strictly above the shared rank threshold."""
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > rank_threshold(s[0], shape, rtol)))


def svd(a, rtol: float = TOL.svd_rtol, max_dim: int = TOL.svd_max_dim) -> SvdFactorization:
    """Thin SVD with the package-wide rank convention."""
    a = as_matrix(a, "A")
    if max(a.shape) > max_dim:
        raise InvalidParameter(f"matrix dimension {max(a.shape)} exceeds configured maximum {max_dim}")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"SVD did not converge: {exc}", matrix_hash(a)) from exc
    tol = rank_threshold(s[0], a.shape, rtol) if s.size else 0.0
    return SvdFactorization(u=u, s=s, vt=vt, rank=numerical_rank(s, a.shape, rtol), tol=tol)


def singular_values(a, max_dim: int = TOL.svd_max_dim) -> np.ndarray:
    """Singular values only; cheaper than :func:`svd` when vectors are unused."""
    a = as_matrix(a, "A")
    if max(a.shape) > max_dim:
        raise InvalidParameter(f"matrix dimension {max(a.shape)} exceeds configured maximum {max_dim}")
    try:
        return np.linalg.svd(a, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"SVD did not converge: {exc}", matrix_hash(a)) from exc


def frobenius_sq(a) -> float:
    """Sum of squared entries."""
    arr = np.asarray(a, dtype=np.float64)
    return float(np.sum(arr * arr))


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a, "A"), as_matrix(b, "B")
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def matvec(a, v) -> np.ndarray:
    a, v = as_matrix(a, "A"), as_vector(v, "v")
    if a.shape[1] != v.shape[0]:
        raise ContractViolation(f"cannot multiply {a.shape} by vector of length {v.shape[0]}")
    return a @ v


def transpose(a) -> np.ndarray:
    return as_matrix(a, "A").T.copy()


def row_slice(a, t: int) -> np.ndarray:
    """Row ``t`` (1-based) of ``a`` as a new vector."""
    a = as_matrix(a, "A")
    if not 1 <= t <= a.shape[0]:
        raise ContractViolation(f"row {t} out of range for {a.shape[0]} rows")
    return a[t - 1].copy()


def col_append(a, col) -> np.ndarray:
    """Return ``a`` with ``col`` appended as a new last column.

    ``a`` may be an empty ``(d, 0)`` array to start a history.
    """
    col = as_vector(col, "column")
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != col.shape[0]:
        raise ContractViolation(f"cannot append column of length {col.shape[0]} to shape {a.shape}")
    return np.column_stack([a, col])


class LowerTriangular:
    """Square matrix whose entries above the diagonal are always zero.

    Indices in the public methods are 1-based to match iteration numbers.
    Reads return copies, so callers cannot break the structure.
    """

    def __init__(self, dim: int) -> None:
        if dim < 1:
            raise InvalidParameter(f"dimension must be >= 1, got {dim}")
        self._data = np.zeros((dim, dim))

    @classmethod
    def from_dense(cls, a) -> "LowerTriangular":
        a = as_matrix(a)
        if a.shape[0] != a.shape[1]:
            raise ContractViolation(f"expected a square matrix, got {a.shape}")
        if np.any(np.triu(a, 1) != 0.0):
            raise ContractViolation("matrix has nonzero entries above the diagonal")
        out = cls(a.shape[0])
        out._data[:] = a
        return out

    @property
    def dim(self) -> int:
        return self._data.shape[0]

    def _check(self, i: int, j: int) -> None:
        if not (1 <= j <= i <= self.dim):
            raise ContractViolation(f"entry ({i}, {j}) is outside the lower triangle of dim {self.dim}")

    def get(self, i: int, j: int) -> float:
        if j > i and 1 <= i <= self.dim and j <= self.dim:
            return 0.0
        self._check(i, j)
        return float(self._data[i - 1, j - 1])

    def set(self, i: int, j: int, value: float) -> None:
        self._check(i, j)
        if not np.isfinite(value):
            raise InvalidInput(f"non-finite value at ({i}, {j})")
        self._data[i - 1, j - 1] = value

    def add(self, i: int, j: int, value: float) -> None:
        self._check(i, j)
        self._data[i - 1, j - 1] += value

    def set_row(self, i: int, values) -> None:
        """Overwrite row ``i`` with ``values[:i]``; later entries must be absent or zero."""
        v = as_vector(values, "row")
        if v.shape[0] < i:
            raise ContractViolation(f"row {i} needs at least {i} values, got {v.shape[0]}")
        if np.any(v[i:] != 0.0):
            raise ContractViolation(f"row {i} has nonzero entries above the diagonal")
        self._check(i, 1)
        self._data[i - 1, :] = 0.0
        self._data[i - 1, :i] = v[:i]

    def row(self, i: int) -> np.ndarray:
        """Full length-``dim`` copy of row ``i``; zeros after position ``i``."""
        self._check(i, 1)
        return self._data[i - 1].copy()

    def prefix(self, t: int) -> np.ndarray:
        """Leading ``t x t`` block as a read-only view."""
        if not 0 <= t <= self.dim:
            raise ContractViolation(f"prefix {t} out of range for dim {self.dim}")
        view = self._data[:t, :t]
        view.flags.writeable = False
        return view

    def to_dense(self) -> np.ndarray:
        return self._data.copy()
