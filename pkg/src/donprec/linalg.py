"""Dense and sparse linear-algebra kernels shared by the whole solver stack.

Dense matrices and vectors are plain float64 ndarrays.  Sparse matrices are
carried by :class:`CsrMatrix`, a validated CSR container that converts to
``scipy.sparse`` for the heavy lifting.  Factorizations are cached on the
operator object, so matrices should be constructed once and reused.
"""

from __future__ import annotations

import warnings
import weakref
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg
import scipy.sparse


class SingularMatrixError(RuntimeError):
    """Raised when a factorization meets a pivot that is zero to working precision."""


def as_vector(x, n=None):
    """Coerce ``x`` to a contiguous float64 vector, optionally checking its length."""
    v = np.ascontiguousarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a vector, got shape {v.shape}")
    if n is not None and v.shape[0] != n:
        raise ValueError(f"expected length {n}, got {v.shape[0]}")
    return v


def check_finite(a, what="array"):
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} contains non-finite entries")
    return a


@dataclass(frozen=True)
class CsrMatrix:
    """Compressed-sparse-row matrix with validated structure.

    Invariants enforced at construction: ``row_ptr`` starts at 0, ends at nnz
    and is monotone; column indices are strictly increasing within each row
    (which also rules out duplicates); all values are finite float64.
    """

    n_rows: int
    n_cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    vals: np.ndarray

    def __post_init__(self):
        rp = np.ascontiguousarray(self.row_ptr, dtype=np.int64)
        ci = np.ascontiguousarray(self.col_idx, dtype=np.int64)
        vals = np.ascontiguousarray(self.vals, dtype=np.float64)
        object.__setattr__(self, "row_ptr", rp)
        object.__setattr__(self, "col_idx", ci)
        object.__setattr__(self, "vals", vals)
        if rp.shape != (self.n_rows + 1,):
            raise ValueError("row_ptr has wrong length")
        if rp[0] != 0 or rp[-1] != len(ci) or len(ci) != len(vals):
            raise ValueError("row_ptr endpoints inconsistent with nnz")
        if np.any(np.diff(rp) < 0):
            raise ValueError("row_ptr is not monotone")
        if len(ci):
            if ci.min() < 0 or ci.max() >= self.n_cols:
                raise ValueError("column index out of range")
            # strictly increasing within each row; mask out row boundaries
            inc = np.diff(ci) > 0
            boundary = np.zeros(len(ci) - 1, dtype=bool)
            ends = rp[1:-1] - 1
            boundary[ends[(ends >= 0) & (ends < len(ci) - 1)]] = True
            if not np.all(inc | boundary):
                raise ValueError("column indices must be strictly increasing per row")
        check_finite(vals, "CSR values")

    @classmethod
    def from_scipy(cls, m) -> "CsrMatrix":
        m = scipy.sparse.csr_matrix(m)
        m.sum_duplicates()
        m.sort_indices()
        m.eliminate_zeros()
        return cls(m.shape[0], m.shape[1], m.indptr.astype(np.int64),
                   m.indices.astype(np.int64), m.data.astype(np.float64))

    @classmethod
    def from_dense(cls, a) -> "CsrMatrix":
        return cls.from_scipy(scipy.sparse.csr_matrix(np.asarray(a, dtype=np.float64)))

    @classmethod
    def identity(cls, n) -> "CsrMatrix":
        return cls.from_scipy(scipy.sparse.identity(n, format="csr"))

    @cached_property
    def scipy(self) -> scipy.sparse.csr_matrix:
        m = scipy.sparse.csr_matrix(
            (self.vals, self.col_idx, self.row_ptr), shape=(self.n_rows, self.n_cols))
        return m

    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self):
        return len(self.vals)

    def diagonal(self):
        return self.scipy.diagonal()

    def transpose(self) -> "CsrMatrix":
        return CsrMatrix.from_scipy(self.scipy.T.tocsr())

    def to_dense(self):
        return self.scipy.toarray()

    def matvec(self, x):
        return spmv(self, x)


def spmv(a: CsrMatrix, x) -> np.ndarray:
    """Sparse matrix-vector product ``y = A x`` in row order."""
    x = as_vector(x, a.n_cols)
    return a.scipy @ x


def qr_thin(m) -> tuple[np.ndarray, np.ndarray]:
    """Thin Householder QR with the diagonal of R made nonnegative.

    Requires rows >= cols.  Rank deficiency is not an error here; it shows up
    as small diagonal entries of R and is handled by the caller.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < m.shape[1]:
        raise ValueError(f"qr_thin needs rows >= cols, got shape {m.shape}")
    q, r = np.linalg.qr(m, mode="reduced")
    # flip column signs so that diag(R) >= 0
    signs = np.where(np.diag(r) < 0.0, -1.0, 1.0)
    return q * signs, r * signs[:, None]


# LU cache keyed by the id of the matrix object; entries die with the array.
_lu_cache: dict[int, tuple] = {}


def _lu_factor_cached(m: np.ndarray):
    key = id(m)
    hit = _lu_cache.get(key)
    if hit is not None and hit[0]() is m:
        return hit[1], hit[2]
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"lu_solve needs a square matrix, got {a.shape}")
    with warnings.catch_warnings():
        # exact singularity is detected below and raised as an error
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(a, check_finite=True)
    absd = np.abs(np.diag(lu))
    scale = max(absd.max(), 1.0) if absd.size else 1.0
    if absd.size and absd.min() <= np.finfo(np.float64).eps * a.shape[0] * scale:
        raise SingularMatrixError("matrix is singular to working precision")
    try:
        ref = weakref.ref(m, lambda _: _lu_cache.pop(key, None))
        _lu_cache[key] = (ref, lu, piv)
    except TypeError:
        pass  # object not weak-referenceable; skip caching
    return lu, piv


def lu_solve(m, b) -> np.ndarray:
    """Solve ``M x = b`` by dense LU with partial pivoting.

    The factorization is cached per matrix object, so repeated solves against
    the same array only factor once.
    """
    lu, piv = _lu_factor_cached(m)
    b = np.asarray(b, dtype=np.float64)
    return scipy.linalg.lu_solve((lu, piv), b, check_finite=False)


class LuSolver:
    """Reusable dense LU factorization with an explicit object lifetime."""

    def __init__(self, m):
        self._m = np.array(m, dtype=np.float64)
        self._lu, self._piv = _lu_factor_cached(self._m)

    @property
    def n(self):
        return self._m.shape[0]

    def solve(self, b):
        return scipy.linalg.lu_solve((self._lu, self._piv), np.asarray(b, dtype=np.float64),
                                     check_finite=False)


def sym_eig(m) -> tuple[np.ndarray, np.ndarray]:
    """Full spectrum of a symmetric matrix: ascending eigenvalues, orthonormal columns."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"sym_eig needs a square matrix, got {a.shape}")
    scale = max(np.abs(a).max(), 1.0) if a.size else 1.0
    if a.size and np.abs(a - a.T).max() > 1e-12 * scale:
        raise ValueError("matrix is not symmetric within 1e-12")
    vals, vecs = scipy.linalg.eigh((a + a.T) / 2.0)
    return vals, vecs


def spectral_radius_estimate(apply, n, iters=200, seed=0) -> float:
    """Power-iteration estimate of the dominant absolute eigenvalue of a linear operator.

    ``apply`` maps a length-``n`` vector to a length-``n`` vector.  The start
    vector is drawn from the seeded generator, so the estimate is deterministic.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    rho = 0.0
    for _ in range(iters):
        w = np.asarray(apply(v), dtype=np.float64)
        rho = np.linalg.norm(w)
        if rho == 0.0:
            return 0.0
        v = w / rho
    return float(rho)


def operator_to_dense(apply, n) -> np.ndarray:
    """Capture a linear operator as a dense matrix by applying it to unit vectors."""
    cols = np.empty((n, n))
    e = np.zeros(n)
    for j in range(n):
        e[j] = 1.0
        cols[:, j] = apply(e)
        e[j] = 0.0
    return cols
