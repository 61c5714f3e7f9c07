"""Galerkin projection onto a subspace and the mean energy functionals.

A subspace basis is an ``(n, k)`` array whose columns span Z (``k = 0``
encodes Z = {0}); a coefficient field is an ``(n_nodes, k)`` array, so the
projected field is ``coeffs @ basis.T``.
"""

import numpy as np
import scipy.linalg as la

from .errors import DimensionError, SingularSystemError
from .hilbert import orthonormalize

__all__ = [
    "as_basis",
    "mean_form",
    "galerkin_solve",
    "mean_error",
    "output_functional",
    "energy",
    "field_rank",
    "principal_angles",
]

# re-orthonormalize bases whose reference Gram matrix is worse conditioned
GRAM_COND_MAX = 1e8
RANK_TOL = 1e-10


def as_basis(vectors, n):
    """Coerce ``vectors`` to an ``(n, k)`` float array.

    Accepts an ``(n, k)`` array, a sequence of length-``n`` vectors, or
    ``None`` / an empty sequence for the null space.
    """
    if vectors is None:
        return np.zeros((n, 0))
    if isinstance(vectors, (list, tuple)):
        if len(vectors) == 0:
            return np.zeros((n, 0))
        B = np.column_stack([np.asarray(v, dtype=float) for v in vectors])
    else:
        B = np.asarray(vectors, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
    if B.shape[0] != n:
        raise DimensionError(f"basis vectors have length {B.shape[0]}, expected {n}")
    return B


def _check_field(op, V, name="field"):
    V = np.asarray(V, dtype=float)
    if V.shape != (op.n_nodes, op.n):
        raise DimensionError(f"{name} shape {V.shape} != {(op.n_nodes, op.n)}")
    return V


def mean_form(op, grid, v, w):
    """``sum_q w_q v_q^T A_q w_q``, reduced in node order."""
    v = _check_field(op, v, "v")
    w = _check_field(op, w, "w")
    if grid.n_nodes != op.n_nodes:
        raise DimensionError("grid and operator disagree on the node count")
    per_node = np.einsum("qi,qi->q", v, op.apply(w))
    return float(np.dot(grid.weights, per_node))


def output_functional(rhs, grid, uZ):
    """``sum_q w_q <f_q, uZ_q>``."""
    rhs = np.asarray(rhs, dtype=float)
    uZ = np.asarray(uZ, dtype=float)
    if rhs.shape != uZ.shape or rhs.shape[0] != grid.n_nodes:
        raise DimensionError(f"rhs {rhs.shape} and field {uZ.shape} do not match the grid")
    return float(np.dot(grid.weights, np.einsum("qi,qi->q", rhs, uZ)))


def mean_error(op, grid, u, uZ):
    """Mean energy of the error, ``abar(u - uZ, u - uZ)``."""
    d = _check_field(op, u) - _check_field(op, uZ)
    return mean_form(op, grid, d, d)


def energy(op, grid, u):
    """``abar(u, u)``."""
    return mean_form(op, grid, u, u)


def galerkin_solve(basis, op, rhs):
    """Per-node Galerkin projection on span(basis).

    Solves ``(B^T A_q B) c_q = B^T f_q`` at every node.

    Returns
    -------
    field : ndarray, shape (n_nodes, n)
        ``u_Z`` with rows ``B c_q``.
    coeffs : ndarray, shape (n_nodes, k)
        The ``c_q``, relative to the columns of ``basis`` as given.

    Raises
    ------
    SingularSystemError
        If the basis is numerically dependent or a reduced matrix is not SPD.
    """
    B = as_basis(basis, op.n)
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape != (op.n_nodes, op.n):
        raise DimensionError(f"rhs shape {rhs.shape} != {(op.n_nodes, op.n)}")
    k = B.shape[1]
    if k == 0:
        return np.zeros((op.n_nodes, op.n)), np.zeros((op.n_nodes, 0))

    # Work in a well-conditioned basis Q = B S when needed, mapping back c_B = S c_Q.
    gram = B.T @ op.reference.dot(B)
    S = None
    if np.linalg.cond(gram) > GRAM_COND_MAX:
        Q, dropped = orthonormalize(B, op.reference, return_dropped=True)
        if dropped:
            raise SingularSystemError(0, f"basis has {dropped} dependent vector(s)")
        S = la.lstsq(B, Q)[0]
        work = Q
    else:
        work = B

    images = np.stack([op.matvec(work[:, j]) for j in range(k)], axis=2)  # (q, n, k)
    reduced = np.einsum("ik,qij->qkj", work, images)
    reduced = 0.5 * (reduced + reduced.transpose(0, 2, 1))
    red_rhs = rhs @ work
    coeffs = np.empty((op.n_nodes, k))
    for q in range(op.n_nodes):
        try:
            cf = la.cho_factor(reduced[q], lower=True, check_finite=False)
        except la.LinAlgError:
            raise SingularSystemError(q, "reduced system is not positive definite") from None
        coeffs[q] = la.cho_solve(cf, red_rhs[q], check_finite=False)
    if not np.all(np.isfinite(coeffs)):
        bad = int(np.argmax(~np.all(np.isfinite(coeffs), axis=1)))
        raise SingularSystemError(bad, "reduced solve produced non-finite coefficients")
    field = coeffs @ work.T
    if S is not None:
        coeffs = coeffs @ S.T
    return field, coeffs


def field_rank(V, inner, tol=RANK_TOL):
    """Numerical dimension of the span of the node values of ``V``.

    Counts singular values of the snapshot set (in the ``inner`` geometry)
    above ``tol`` times the largest one.
    """
    V = np.asarray(V, dtype=float)
    if not np.any(V):
        return 0
    L = np.linalg.cholesky(inner.toarray())
    sv = np.linalg.svd(L.T @ V.T, compute_uv=False)
    return int(np.sum(sv > tol * sv.max()))


def principal_angles(B1, B2, inner):
    """Principal angles (radians, ascending) between two column spans.

    Computed from sines of the component of the smaller space orthogonal to
    the larger one, which stays accurate for tiny angles.
    """
    Q1 = orthonormalize(B1, inner)
    Q2 = orthonormalize(B2, inner)
    if Q1.shape[1] < Q2.shape[1]:
        Q1, Q2 = Q2, Q1
    if Q2.shape[1] == 0:
        return np.zeros(0)
    P = Q2 - Q1 @ (Q1.T @ inner.dot(Q2))
    L = np.linalg.cholesky(inner.toarray())
    sines = np.linalg.svd(L.T @ P, compute_uv=False)
    return np.sort(np.arcsin(np.clip(sines, 0.0, 1.0)))
