"""Optimal subspaces for the mean energy error.

Rank one: maximize ``J(z) = sum_q w_q <f_q, z>^2 / (z^T A_q z)`` over the
unit sphere of the reference norm (``J`` is invariant under scaling of
``z``).  The optimal line is ``span{w}`` and its Galerkin field carries
``J(w)`` of the total energy.

Rank k: alternating minimization of ``sum_q w_q a(u_q - B c_q, u_q - B c_q; q)``
over the basis ``B`` and the coefficient field ``c``.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as la
import scipy.sparse.linalg as spla

from .errors import ConfigError, ConvergenceError, DimensionError, SingularSystemError, ZeroDataError
from .galerkin import galerkin_solve, output_functional
from .hilbert import orthonormalize
from .parametric import mean_operator, truth_solve

__all__ = [
    "OptimizerOptions",
    "Rank1Candidate",
    "RankKCandidate",
    "rank1_objective",
    "rank1_gradient",
    "rank1_stationarity_residual",
    "rank1_maximize",
    "rankk_minimize",
    "canonical_sign",
]

log = logging.getLogger(__name__)

_EPS = np.finfo(float).eps
# J is evaluated with relative error of a few dozen eps on stiff families;
# the line search tolerates losses of that size
ROUNDING_SLACK = 256.0


@dataclass(frozen=True)
class OptimizerOptions:
    """Budgets and tolerances for both optimizers.

    ``tol`` is the stationarity tolerance of the rank-one ascent and the
    relative-decrease tolerance of the rank-k sweeps.
    """

    tol: float = 1e-9
    n_starts: int = 8
    seed: int = 0
    max_iters: int = 10_000
    max_sweeps: int = 200
    armijo: float = 1e-4
    threads: int = 1
    direct_max: int = 2000
    cg_tol: float = 1e-12
    extra_starts: tuple = ()

    def __post_init__(self):
        if not self.tol > 0:
            raise ConfigError("tol must be positive")
        if self.n_starts < 1:
            raise ConfigError("n_starts must be at least 1")
        if self.max_iters < 1 or self.max_sweeps < 1:
            raise ConfigError("iteration budgets must be positive")


@dataclass(frozen=True)
class Rank1Candidate:
    direction: np.ndarray
    objective: float
    stationarity_residual: float
    starts_used: int
    iterations: int = 0
    converged: bool = True
    stationary_values: tuple = ()
    alternatives: tuple = field(default=(), repr=False)


@dataclass(frozen=True)
class RankKCandidate:
    basis: np.ndarray
    coefficients: np.ndarray
    objective: float
    sweeps_used: int
    converged: bool = True
    sweep_log: tuple = field(default=(), repr=False)


def _check_vector(z, op):
    z = np.asarray(z, dtype=float)
    if z.shape != (op.n,):
        raise DimensionError(f"vector shape {z.shape} != {(op.n,)}")
    if not np.any(z):
        raise ValueError("the zero vector is not an admissible direction")
    return z


def _data(op, grid, rhs):
    F = np.ascontiguousarray(rhs, dtype=float)
    if F.shape != (op.n_nodes, op.n):
        raise DimensionError(f"rhs shape {F.shape} != {(op.n_nodes, op.n)}")
    if grid.n_nodes != op.n_nodes:
        raise DimensionError("grid and operator disagree on the node count")
    return F, np.ascontiguousarray(grid.weights, dtype=float)


def rank1_objective(z, op, grid, rhs):
    """``J(z) = sum_q w_q <f_q, z>^2 / a(z, z; q)`` for nonzero ``z``."""
    z = _check_vector(z, op)
    F, w = _data(op, grid, rhs)
    return op.stack.rank1_value(F, w, z)


def rank1_gradient(z, op, grid, rhs):
    """Euclidean gradient of ``J``; orthogonal to ``z`` since ``J`` is 0-homogeneous."""
    z = _check_vector(z, op)
    F, w = _data(op, grid, rhs)
    return op.stack.rank1_value_grad(F, w, z)[1]


def _ref_norm(R, z):
    return float(np.sqrt(z @ R.dot(z)))


def rank1_stationarity_residual(z, op, grid, rhs):
    """Relative residual of the rank-one first-order optimality system.

    With ``psi_q = <f_q, z> / a(z, z; q)`` the system reads
    ``sum_q w_q psi_q <f_q, v> = sum_q w_q psi_q^2 a(z, v; q)`` for all v.
    Returns the dual reference norm of the difference of the two sides at
    ``z / |z|``, divided by ``J(z)``.  This equals half of
    ``|grad J| / J``.
    """
    z = _check_vector(z, op)
    F, w = _data(op, grid, rhs)
    R = op.reference
    zh = z / _ref_norm(R, z)
    Az = op.matvec(zh)
    psi = (F @ zh) / np.einsum("qi,i->q", Az, zh)
    lhs = (w * psi) @ F
    rhs_side = (w * psi * psi) @ Az
    g = lhs - rhs_side
    norm = float(np.sqrt(max(g @ R.solve(g), 0.0)))
    J = float(np.dot(w, psi * (F @ zh)))
    if J == 0.0:
        return 0.0 if norm == 0.0 else np.inf
    return norm / J


def canonical_sign(v):
    """Flip ``v`` so its first entry above round-off is positive."""
    v = np.asarray(v, dtype=float)
    scale = np.max(np.abs(v)) if v.size else 0.0
    if scale == 0.0:
        return v
    idx = np.flatnonzero(np.abs(v) > 1e-12 * scale)[0]
    return -v if v[idx] < 0 else v


@dataclass
class _Run:
    direction: np.ndarray
    objective: float
    residual: float
    iterations: int
    converged: bool


def _ascend(z0, op, F, w, options):
    """Gradient ascent on the reference unit sphere.

    Ascent direction is the reference-Riesz representative of the gradient;
    the trial step is Barzilai-Borwein, shortened by halving until the
    Armijo condition holds.  Retraction is renormalization.
    """
    R = op.reference
    stack = op.stack
    z = z0 / _ref_norm(R, z0)
    J, g = stack.rank1_value_grad(F, w, z)
    if J <= 0.0:
        return _Run(z, J, np.inf, 0, False)
    d = R.solve(g)
    d -= (z @ R.dot(d)) * z
    gd = float(g @ d)
    res = np.sqrt(max(gd, 0.0)) / J
    t = 1.0 / J
    t_min, t_max = 1e-12 / J, 1e12 / J
    it = 0
    converged = res <= options.tol
    while not converged and it < options.max_iters:
        it += 1
        slack = ROUNDING_SLACK * _EPS * abs(J)
        step = t
        accepted = False
        for _ in range(60):
            zn = z + step * d
            zn /= _ref_norm(R, zn)
            Jn, gn = stack.rank1_value_grad(F, w, zn)
            if Jn >= J + options.armijo * step * gd - slack:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        dn = R.solve(gn)
        dn -= (zn @ R.dot(dn)) * zn
        s = zn - z
        sy = float(s @ (gn - g))
        ss = float(s @ R.dot(s))
        # ascent: curvature along s is negative near a maximizer
        t = ss / -sy if sy < 0 else 2.0 * step
        t = min(max(t, t_min), t_max)
        z, J, g, d = zn, Jn, gn, dn
        gd = float(g @ d)
        res = np.sqrt(max(gd, 0.0)) / J
        converged = res <= options.tol
    return _Run(z, float(J), float(res), it, bool(converged))


def _distinct_values(values, rel=1e-8):
    out = []
    for v in sorted(values, reverse=True):
        if not out or abs(out[-1] - v) > rel * max(abs(out[-1]), _EPS):
            out.append(v)
    return tuple(out)


def _mean_riesz(op, grid, F):
    U = truth_solve(op, F)
    return grid.weights @ U


def rank1_maximize(op, grid, rhs, options=None):
    """Multi-start maximization of ``J`` on the reference unit sphere.

    Starts: the normalized mean Riesz vector ``sum_q w_q A_q^{-1} f_q``,
    ``n_starts - 1`` seeded random vectors, then any ``options.extra_starts``.
    The start reaching the largest ``J`` wins.  Within ``1e-12`` relative of
    the best value, converged runs are preferred and the lexicographically
    smallest direction after the sign convention is taken.

    Raises
    ------
    ZeroDataError
        If ``rhs`` vanishes identically.
    ConvergenceError
        If the winning start did not reach ``options.tol``; ``best`` carries it.
    """
    options = options or OptimizerOptions()
    F, w = _data(op, grid, rhs)
    if not np.any(F):
        raise ZeroDataError("f vanishes at every node; every direction is optimal")
    rng = np.random.default_rng(options.seed)
    starts = []
    riesz = _mean_riesz(op, grid, F)
    if np.any(riesz):
        starts.append(riesz)
    starts.extend(rng.standard_normal((options.n_starts - 1, op.n)))
    for extra in options.extra_starts:
        extra = np.asarray(extra, dtype=float)
        if extra.shape == (op.n,) and np.any(extra):
            starts.append(extra)

    def run(z0):
        return _ascend(np.asarray(z0, dtype=float), op, F, w, options)

    if options.threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=options.threads) as pool:
            runs = list(pool.map(run, starts))
    else:
        runs = [run(z0) for z0 in starts]

    for r in runs:
        r.direction = canonical_sign(r.direction)
    j_best = max(r.objective for r in runs)
    ties = [r for r in runs if r.objective >= j_best - 1e-12 * abs(j_best)]
    # values inside the tie band differ by rounding only, so prefer converged runs
    ties = [r for r in ties if r.converged] or ties
    best = min(ties, key=lambda r: tuple(r.direction))
    values = _distinct_values([r.objective for r in runs if r.converged])
    # one direction per lower stationary value, best first
    alternatives = []
    for v in values:
        if v >= j_best - 1e-8 * abs(j_best):
            continue
        match = [r for r in runs if r.converged and abs(r.objective - v) <= 1e-8 * abs(v)]
        alternatives.append(min(match, key=lambda r: tuple(r.direction)).direction)
    cand = Rank1Candidate(
        direction=best.direction,
        objective=best.objective,
        stationarity_residual=best.residual,
        starts_used=len(runs),
        iterations=sum(r.iterations for r in runs),
        converged=best.converged,
        stationary_values=values,
        alternatives=tuple(alternatives),
    )
    if not best.converged:
        raise ConvergenceError(
            f"rank-one ascent stopped at residual {best.residual:.3e} > tol {options.tol:.1e}",
            best=cand,
        )
    return cand


# Rank k ---------------------------------------------------------------------

def _complete(Q, k, R, rng):
    """Pad an R-orthonormal ``Q`` with random directions up to ``k`` columns."""
    tries = 0
    while Q.shape[1] < k:
        tries += 1
        if tries > 10 * k + 10:
            raise SingularSystemError(0, "cannot complete the basis")
        extra = rng.standard_normal((R.n, k - Q.shape[1]))
        Q = orthonormalize(np.column_stack([Q, extra]), R)
    return Q[:, :k]


def _initial_basis(op, grid, F, k, rng):
    abar = mean_operator(op, grid)
    cols = [abar.solve(grid.weights @ F)]
    for q in np.unique(np.linspace(0, op.n_nodes - 1, k).round().astype(int))[: k - 1]:
        cols.append(abar.solve(F[q]))
    B = orthonormalize(np.column_stack(cols), op.reference)
    return _complete(B, k, op.reference, rng)


def _basis_step(op, grid, F, B, C, options, abar):
    """Minimize over the basis with the coefficient field frozen.

    Solves ``sum_q w_q A_q X c_q c_q^T = sum_q w_q f_q c_q^T`` restricted to
    the coefficient directions that are actually excited; idle directions
    keep their current basis columns.
    """
    w = grid.weights
    G = (C * w[:, None]).T @ C
    lam, V = np.linalg.eigh(0.5 * (G + G.T))
    if lam[-1] <= 0.0:
        raise SingularSystemError(0, "all coefficients vanish; basis step is singular")
    active = lam > 1e-12 * lam[-1]
    Ca = C @ V[:, active]
    Bv = B @ V
    idle = Bv[:, ~active]
    n, r = op.n, Ca.shape[1]
    rhs_mat = F.T @ (Ca * w[:, None])  # (n, r)
    b = rhs_mat.ravel(order="F")

    if n * r <= options.direct_max:
        M = np.zeros((n * r, n * r))
        for q, A in enumerate(op.forms):
            M += w[q] * np.kron(np.outer(Ca[q], Ca[q]), A.toarray())
        M = 0.5 * (M + M.T)
        try:
            x = la.cho_solve(la.cho_factor(M, lower=True), b)
        except la.LinAlgError:
            raise SingularSystemError(0, "basis-step system is not positive definite") from None
    else:
        def matvec(x):
            X = x.reshape((n, r), order="F")
            AX = np.stack([op.matvec(X[:, j]) for j in range(r)], axis=2)  # (q, n, r)
            Y = np.einsum("q,qnj,qj,qk->nk", w, AX, Ca, Ca)
            return Y.ravel(order="F")

        Ga_inv = np.linalg.inv(Ca.T @ (Ca * w[:, None]))

        def precond(x):
            X = x.reshape((n, r), order="F")
            return (abar.solve(X) @ Ga_inv).ravel(order="F")

        A_op = spla.LinearOperator((n * r, n * r), matvec=matvec, dtype=float)
        P_op = spla.LinearOperator((n * r, n * r), matvec=precond, dtype=float)
        x0 = Bv[:, active].ravel(order="F")
        x, info = spla.cg(A_op, b, x0=x0, rtol=options.cg_tol, atol=0.0, maxiter=20 * n * r, M=P_op)
        if info < 0:
            raise SingularSystemError(0, "conjugate gradients broke down in the basis step")
        if info > 0:
            log.warning("basis-step CG hit its iteration cap (%d)", info)
    X = x.reshape((n, r), order="F")
    return np.column_stack([X, idle])


def rankk_minimize(op, grid, rhs, k, options=None, total_energy=None, init=None):
    """Alternating minimization for the best subspace of dimension <= k.

    Each sweep runs a basis step with coefficients frozen, re-orthonormalizes
    the basis in the reference inner product and recomputes the Galerkin
    coefficients.  Stops when the relative decrease of the mean error falls
    below ``options.tol`` or after ``options.max_sweeps`` sweeps.

    ``total_energy`` is ``abar(u, u)`` for this data; it is computed by
    per-node solves when omitted.  The objective is evaluated as
    ``total_energy - sum_q w_q <f_q, u_Z(q)>``.
    """
    options = options or OptimizerOptions()
    if not (1 <= int(k) <= op.n):
        raise ConfigError(f"k must satisfy 1 <= k <= n={op.n}, got {k}")
    k = int(k)
    F, w = _data(op, grid, rhs)
    if not np.any(F):
        raise ZeroDataError("f vanishes at every node; every subspace is optimal")
    if total_energy is None:
        total_energy = output_functional(F, grid, truth_solve(op, F))
    rng = np.random.default_rng(options.seed)
    R = op.reference
    abar = mean_operator(op, grid)
    if init is None:
        B = _initial_basis(op, grid, F, k, rng)
    else:
        B = _complete(orthonormalize(init, R), k, R, rng)

    uZ, C = galerkin_solve(B, op, F)
    obj = total_energy - output_functional(F, grid, uZ)
    history = [obj]
    converged = False
    sweeps = 0
    floor = 1e-15 * abs(total_energy)
    if obj <= floor:
        converged = True
    while not converged and sweeps < options.max_sweeps:
        sweeps += 1
        X = _basis_step(op, grid, F, B, C, options, abar)
        B_new = _complete(orthonormalize(X, R), k, R, rng)
        uZ_new, C_new = galerkin_solve(B_new, op, F)
        obj_new = total_energy - output_functional(F, grid, uZ_new)
        decrease = obj - obj_new
        prev = obj
        # a sweep that increases the objective (round-off) is discarded
        if obj_new <= obj:
            B, C, obj = B_new, C_new, obj_new
        history.append(obj)
        if obj <= floor or decrease < options.tol * max(abs(prev), floor):
            converged = True
    return RankKCandidate(
        basis=B,
        coefficients=C,
        objective=float(obj),
        sweeps_used=sweeps,
        converged=converged,
        sweep_log=tuple(float(h) for h in history),
    )


def with_options(options, **changes):
    """Copy of ``options`` with fields replaced."""
    return replace(options, **changes)
