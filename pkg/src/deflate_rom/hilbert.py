"""Discrete Hilbert space primitives.

A :class:`SymmetricForm` wraps a symmetric matrix, dense (``numpy.ndarray``)
or sparse (CSR), and exposes evaluation, matrix-vector products and SPD
solves with a cached factorization.  Vectors of H are plain 1-D float arrays
of coefficients in the discrete basis.
"""

import logging
import threading

import numpy as np
import scipy.io
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DimensionError, NotPositiveDefiniteError

__all__ = [
    "SymmetricForm",
    "apply_form",
    "solve_spd",
    "orthonormalize",
    "identity_form",
    "read_form",
    "write_form",
    "read_array",
    "write_array",
]

log = logging.getLogger(__name__)

# relative asymmetry accepted (and removed) at construction
SYMMETRY_TOL = 1e-10
# relative norm loss below which a vector counts as dependent
DEPENDENCE_TOL = 1e-10
# sparse matrices at most this wide use banded Cholesky
MAX_BANDWIDTH = 64
# small sparse forms keep a dense copy for products (call overhead dominates)
DENSE_PRODUCT_MAX = 256


def _bandwidth(mat):
    coo = mat.tocoo()
    if coo.nnz == 0:
        return 0
    return int(np.max(np.abs(coo.row - coo.col)))


class _DenseCholesky:
    def __init__(self, a):
        try:
            self._cf = la.cho_factor(a, lower=True, check_finite=True)
        except la.LinAlgError as exc:
            raise NotPositiveDefiniteError(f"dense Cholesky failed: {exc}") from None

    def solve(self, b):
        return la.cho_solve(self._cf, b, check_finite=False)


class _BandedCholesky:
    def __init__(self, mat, bw):
        n = mat.shape[0]
        ab = np.zeros((bw + 1, n))
        for d in range(bw + 1):
            diag = mat.diagonal(-d)
            ab[d, : n - d] = diag
        try:
            self._cb = la.cholesky_banded(ab, lower=True)
        except la.LinAlgError as exc:
            raise NotPositiveDefiniteError(f"banded Cholesky failed: {exc}") from None

    def solve(self, b):
        return la.cho_solve_banded((self._cb, True), b, check_finite=False)


class _SparseLDL:
    # splu in symmetric mode without pivoting is an LDL^T factorization, so the
    # diagonal of U carries the signs of D.
    def __init__(self, mat):
        try:
            self._lu = spla.splu(
                mat.tocsc(),
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
        except RuntimeError as exc:
            raise NotPositiveDefiniteError(f"sparse factorization failed: {exc}") from None
        d = self._lu.U.diagonal()
        if not np.all(d > 0):
            raise NotPositiveDefiniteError("sparse factorization has non-positive pivots")

    def solve(self, b):
        return self._lu.solve(np.asarray(b, dtype=float))


class SymmetricForm:
    """A symmetric bilinear form on R^n stored as a matrix.

    Parameters
    ----------
    matrix : array_like or scipy.sparse matrix
        Square matrix.  Asymmetry up to ``SYMMETRY_TOL`` (relative to the
        largest entry) is removed by averaging with the transpose; larger
        asymmetry raises ``ValueError``.
    spd_hint : bool
        If set, factorize immediately so a non-SPD matrix fails here.
    """

    def __init__(self, matrix, spd_hint=False):
        if sp.issparse(matrix):
            mat = sp.csr_matrix(matrix, dtype=float, copy=True)
            mat.sum_duplicates()
            mat.sort_indices()
        else:
            mat = np.array(matrix, dtype=float, copy=True)
            if mat.ndim != 2:
                raise DimensionError(f"expected a 2-D matrix, got ndim={mat.ndim}")
        if mat.shape[0] != mat.shape[1]:
            raise DimensionError(f"matrix must be square, got {mat.shape}")
        if sp.issparse(mat):
            data = mat.data
            if data.size and not np.all(np.isfinite(data)):
                raise ValueError("matrix has non-finite entries")
            scale = np.max(np.abs(data)) if data.size else 0.0
            asym = abs(mat - mat.T)
            gap = asym.max() if asym.nnz else 0.0
        else:
            if not np.all(np.isfinite(mat)):
                raise ValueError("matrix has non-finite entries")
            scale = np.max(np.abs(mat)) if mat.size else 0.0
            gap = np.max(np.abs(mat - mat.T)) if mat.size else 0.0
        if gap > SYMMETRY_TOL * max(scale, np.finfo(float).tiny):
            raise ValueError(f"matrix is not symmetric (max asymmetry {gap:.3e})")
        if gap > 0:
            mat = (mat + mat.T) * 0.5
            if sp.issparse(mat):
                mat = sp.csr_matrix(mat)
                mat.sort_indices()
        if not sp.issparse(mat):
            mat.flags.writeable = False
        self._mat = mat
        self._prod = mat
        if sp.issparse(mat) and mat.shape[0] <= DENSE_PRODUCT_MAX:
            self._prod = mat.toarray()
            self._prod.flags.writeable = False
        self._factor = None
        self._lock = threading.Lock()
        self.spd_hint = bool(spd_hint)
        if spd_hint:
            self.factor()

    @property
    def matrix(self):
        return self._mat

    @property
    def n(self):
        return self._mat.shape[0]

    @property
    def is_sparse(self):
        return sp.issparse(self._mat)

    def __repr__(self):
        kind = "sparse" if self.is_sparse else "dense"
        return f"SymmetricForm(n={self.n}, {kind})"

    def toarray(self):
        if self.is_sparse:
            return self._mat.toarray()
        return np.array(self._mat)

    def dot(self, v):
        """Matrix product ``A @ v`` for a vector or a column block."""
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.n:
            raise DimensionError(f"vector length {v.shape[0]} != form dimension {self.n}")
        return self._prod @ v

    def __call__(self, v, w):
        return apply_form(self, v, w)

    def factor(self):
        """Return the cached SPD factorization, computing it on first use."""
        if self._factor is None:
            with self._lock:
                if self._factor is None:
                    self._factor = self._make_factor()
        return self._factor

    def _make_factor(self):
        if not self.is_sparse:
            return _DenseCholesky(self._mat)
        bw = _bandwidth(self._mat)
        if bw <= MAX_BANDWIDTH:
            return _BandedCholesky(self._mat, bw)
        return _SparseLDL(self._mat)

    def solve(self, b):
        return solve_spd(self, b)


def identity_form(n):
    """Euclidean inner product on R^n, stored sparse."""
    return SymmetricForm(sp.identity(n, format="csr"))


def apply_form(A, v, w):
    """Evaluate ``v^T A w``."""
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    if v.shape != (A.n,) or w.shape != (A.n,):
        raise DimensionError(
            f"vectors of shape {v.shape} and {w.shape} incompatible with n={A.n}"
        )
    return float(v @ A.dot(w))


def solve_spd(A, b):
    """Solve ``A x = b`` for SPD ``A``.

    ``b`` may be a vector or an ``(n, m)`` block of right-hand sides.  The
    factorization is chosen by storage: dense Cholesky, banded Cholesky for
    narrow sparse matrices, sparse LDL^T otherwise.

    Raises
    ------
    NotPositiveDefiniteError
        If ``A`` cannot be factorized as SPD.
    """
    b = np.asarray(b, dtype=float)
    if b.shape[0] != A.n:
        raise DimensionError(f"rhs length {b.shape[0]} != form dimension {A.n}")
    fac = A.factor()
    if not np.any(b):
        return np.zeros_like(b)
    return fac.solve(b)


def orthonormalize(vectors, inner, return_dropped=False):
    """Orthonormalize columns under ``inner`` with twice-iterated Gram-Schmidt.

    A column is dropped when its norm after projection falls below
    ``DEPENDENCE_TOL`` times its norm before projection.

    Parameters
    ----------
    vectors : array_like, shape (n, k) or sequence of k vectors
    inner : SymmetricForm
    return_dropped : bool
        Also return the number of dropped columns.

    Returns
    -------
    Q : ndarray, shape (n, r), r <= k
    """
    V = np.asarray(vectors, dtype=float)
    if V.ndim == 1:
        V = V[:, None]
    if V.ndim == 2 and V.shape[0] != inner.n and V.shape[1] == inner.n:
        V = V.T
    if V.shape[0] != inner.n:
        raise DimensionError(f"vectors of length {V.shape[0]} incompatible with n={inner.n}")
    kept = []
    kept_images = []
    dropped = 0
    for j in range(V.shape[1]):
        v = V[:, j].copy()
        Av = inner.dot(v)
        norm0 = np.sqrt(max(v @ Av, 0.0))
        if norm0 == 0.0 or not np.isfinite(norm0):
            dropped += 1
            continue
        for _ in range(2):
            for q, Aq in zip(kept, kept_images):
                v -= (Aq @ v) * q
        Av = inner.dot(v)
        norm = np.sqrt(max(v @ Av, 0.0))
        if norm < DEPENDENCE_TOL * norm0:
            dropped += 1
            continue
        kept.append(v / norm)
        kept_images.append(Av / norm)
    if dropped:
        log.debug("orthonormalize dropped %d dependent vector(s)", dropped)
    Q = np.column_stack(kept) if kept else np.zeros((inner.n, 0))
    if return_dropped:
        return Q, dropped
    return Q


# Matrix Market I/O ----------------------------------------------------------

def write_form(path, form):
    """Write a form as Matrix Market: coordinate if sparse, array if dense."""
    mat = form.matrix if isinstance(form, SymmetricForm) else form
    scipy.io.mmwrite(str(path), mat, precision=17, symmetry="symmetric")


def read_form(path, spd_hint=False):
    mat = scipy.io.mmread(str(path))
    if sp.issparse(mat):
        mat = sp.csr_matrix(mat)
    return SymmetricForm(mat, spd_hint=spd_hint)


def write_array(path, arr):
    """Write a dense 1-D or 2-D array in Matrix Market array format."""
    arr = np.asarray(arr, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    scipy.io.mmwrite(str(path), arr, precision=17, symmetry="general")


def read_array(path):
    arr = scipy.io.mmread(str(path))
    if sp.issparse(arr):
        arr = arr.toarray()
    return np.asarray(arr, dtype=float)
