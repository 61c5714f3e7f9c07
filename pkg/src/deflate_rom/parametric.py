"""Parameter grids, parametric operator families and the per-node truth solver.

The parameter domain is discretized by a finite quadrature: every integral
over the parameter becomes a weighted sum over grid nodes.  Parametric fields
and right-hand sides are plain ``(n_nodes, n)`` arrays whose row ``q`` is the
value at node ``q``.
"""

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    CoercivityError,
    ConfigError,
    DimensionError,
    NodeSolveError,
    NotPositiveDefiniteError,
)
from .hilbert import SymmetricForm, identity_form, read_array, read_form, write_array, write_form
from .kernels import NodeStack

__all__ = [
    "ParameterGrid",
    "ParametricOperator",
    "check_coercivity",
    "truth_solve",
    "mean_operator",
    "parse_quadrature",
    "generate_diffusion_1d",
    "generate_random_spd_family",
    "save_problem",
    "load_problem",
    "default_threads",
]

# dense generalized eigensolver up to this size, shift-invert Lanczos above
DENSE_EIG_MAX = 2000


def default_threads():
    env = os.environ.get("DEFLATE_ROM_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(frozen=True)
class ParameterGrid:
    """Quadrature nodes (shape ``(n_nodes, d)``) and positive weights."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float)
        if nodes.ndim == 1:
            nodes = nodes[:, None]
        weights = np.array(self.weights, dtype=float).ravel()
        if nodes.ndim != 2 or nodes.shape[0] < 1:
            raise ValueError("a parameter grid needs at least one node")
        if weights.shape != (nodes.shape[0],):
            raise DimensionError(f"{nodes.shape[0]} nodes but {weights.size} weights")
        if not (np.all(np.isfinite(weights)) and np.all(weights > 0)):
            raise ValueError("quadrature weights must be finite and strictly positive")
        if not np.all(np.isfinite(nodes)):
            raise ValueError("parameter nodes must be finite")
        nodes.flags.writeable = False
        weights.flags.writeable = False
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def gauss_legendre(cls, n_nodes, lower=1.0, upper=2.0):
        x, w = np.polynomial.legendre.leggauss(n_nodes)
        half = 0.5 * (upper - lower)
        return cls(lower + half * (x + 1.0), half * w)

    @classmethod
    def uniform_weights(cls, nodes):
        nodes = np.asarray(nodes, dtype=float)
        m = nodes.shape[0]
        return cls(nodes, np.full(m, 1.0 / m))

    @property
    def n_nodes(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.nodes.shape[1]

    @property
    def total_weight(self):
        return float(np.sum(self.weights))

    @property
    def midpoint(self):
        """Center of the bounding box of the nodes."""
        return 0.5 * (self.nodes.min(axis=0) + self.nodes.max(axis=0))


@dataclass(frozen=True)
class ParametricOperator:
    """One symmetric form per grid node plus the reference inner product.

    ``alpha`` is an optional certified coercivity constant relative to
    ``reference``.
    """

    forms: tuple
    reference: SymmetricForm
    alpha: float | None = None
    labels: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        forms = tuple(self.forms)
        if not forms:
            raise ValueError("operator family is empty")
        n = self.reference.n
        for q, A in enumerate(forms):
            if not isinstance(A, SymmetricForm):
                raise TypeError(f"form {q} is not a SymmetricForm")
            if A.n != n:
                raise DimensionError(f"form {q} has dimension {A.n}, reference has {n}")
        object.__setattr__(self, "forms", forms)
        if self.alpha is not None and not self.alpha > 0:
            raise ValueError("certified alpha must be positive")

    @property
    def n(self):
        return self.reference.n

    @property
    def n_nodes(self):
        return len(self.forms)

    @cached_property
    def stack(self):
        """Packed node matrices for the hot kernels."""
        return NodeStack([A.matrix for A in self.forms])

    def apply(self, V):
        """Rows ``A_q @ V[q]`` for a field ``V`` of shape ``(n_nodes, n)``."""
        V = np.asarray(V, dtype=float)
        if V.shape != (self.n_nodes, self.n):
            raise DimensionError(f"field shape {V.shape} != {(self.n_nodes, self.n)}")
        return self.stack.field_matvec(V)

    def matvec(self, z):
        """Rows ``A_q @ z`` for one vector ``z``."""
        z = np.asarray(z, dtype=float)
        if z.shape != (self.n,):
            raise DimensionError(f"vector shape {z.shape} != {(self.n,)}")
        return self.stack.matvec(z)


def _check_rhs(op, rhs):
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape != (op.n_nodes, op.n):
        raise DimensionError(f"rhs shape {rhs.shape} != {(op.n_nodes, op.n)}")
    return rhs


def smallest_pencil_eigenvalue(A, R):
    """Smallest generalized eigenvalue of the pencil ``(A, R)``."""
    R.factor()  # raises NotPositiveDefiniteError for a bad reference
    if A.n <= DENSE_EIG_MAX:
        vals = la.eigh(A.toarray(), R.toarray(), eigvals_only=True, subset_by_index=[0, 0])
        return float(vals[0])
    vals = spla.eigsh(
        sp.csc_matrix(A.matrix), k=1, M=sp.csc_matrix(R.matrix), sigma=0.0, which="LM",
        return_eigenvectors=False,
    )
    return float(np.min(vals))


def check_coercivity(op):
    """Minimum over nodes of the smallest eigenvalue of ``(A_q, reference)``.

    Raises
    ------
    CoercivityError
        If ``op.alpha`` is set and the measured constant falls below it.
    NotPositiveDefiniteError
        If the reference form is not SPD.
    """
    measured = min(smallest_pencil_eigenvalue(A, op.reference) for A in op.forms)
    if op.alpha is not None and measured < op.alpha * (1.0 - 1e-10):
        raise CoercivityError(
            f"measured coercivity {measured:.6e} below certified alpha {op.alpha:.6e}"
        )
    return measured


def truth_solve(op, rhs, threads=1):
    """Solve ``A_q u_q = f_q`` at every node; returns the ``(n_nodes, n)`` field.

    Nodes may be processed by ``threads`` workers; the result is ordered by
    node index either way.
    """
    rhs = _check_rhs(op, rhs)

    def one(q):
        try:
            return op.forms[q].solve(rhs[q])
        except NotPositiveDefiniteError as exc:
            raise NodeSolveError(q, str(exc)) from None

    if threads and threads > 1 and op.n_nodes > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, range(op.n_nodes)))
    else:
        rows = [one(q) for q in range(op.n_nodes)]
    return np.array(rows, dtype=float).reshape(op.n_nodes, op.n)


def mean_operator(op, grid):
    """The weight-averaged form ``sum_q w_q A_q / sum_q w_q``."""
    w = grid.weights / grid.total_weight
    if all(A.is_sparse for A in op.forms):
        total = sp.csr_matrix((op.n, op.n))
        for wq, A in zip(w, op.forms):
            total = total + wq * A.matrix
        return SymmetricForm(total)
    total = np.zeros((op.n, op.n))
    for wq, A in zip(w, op.forms):
        total += wq * A.toarray()
    return SymmetricForm(total)


# Problem generators ---------------------------------------------------------

def parse_quadrature(spec=None):
    """Build a ``ParameterGrid`` from a quadrature description.

    Accepted forms: ``None`` (33 Gauss-Legendre nodes on [1, 2]); a mapping
    ``{"kind": "gauss", "n": int, "interval": [a, b]}``; a mapping with
    ``"nodes"`` and optional ``"weights"`` (uniform ``1/n_nodes`` if absent);
    or an existing ``ParameterGrid``.
    """
    if spec is None:
        return ParameterGrid.gauss_legendre(33, 1.0, 2.0)
    if isinstance(spec, ParameterGrid):
        return spec
    if not isinstance(spec, dict):
        raise ConfigError(f"invalid quadrature description: {spec!r}")
    try:
        if "nodes" in spec:
            nodes = np.asarray(spec["nodes"], dtype=float)
            if "weights" in spec:
                return ParameterGrid(nodes, spec["weights"])
            return ParameterGrid.uniform_weights(nodes)
        kind = spec.get("kind", "gauss")
        if kind not in ("gauss", "gauss_legendre"):
            raise ConfigError(f"unknown quadrature kind {kind!r}")
        n_nodes = int(spec.get("n", 33))
        if n_nodes < 1:
            raise ConfigError("quadrature needs at least one node")
        lower, upper = spec.get("interval", (1.0, 2.0))
        if not float(upper) > float(lower):
            raise ConfigError("quadrature interval must satisfy a < b")
        return ParameterGrid.gauss_legendre(n_nodes, float(lower), float(upper))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid quadrature description: {exc}") from None


def _p1_stiffness(kappa, h):
    # kappa: per-element conductivity; returns interior-node stiffness (CSR)
    main = (kappa[:-1] + kappa[1:]) / h
    off = -kappa[1:-1] / h
    return sp.diags([off, main, off], [-1, 0, 1], format="csr")


def _p1_mass(n_elements):
    h = 1.0 / n_elements
    m = n_elements - 1
    return sp.diags(
        [np.full(m - 1, h / 6), np.full(m, 4 * h / 6), np.full(m - 1, h / 6)],
        [-1, 0, 1],
        format="csr",
    )


def _right_fraction(n_elements):
    # fraction of each element lying in [1/2, 1]
    x = np.linspace(0.0, 1.0, n_elements + 1)
    lo = np.maximum(x[:-1], 0.5)
    return np.clip(x[1:] - lo, 0.0, None) * n_elements


def generate_diffusion_1d(n_elements, parameter_spec=None, reference="midpoint"):
    """P1 finite elements for ``-(k u')' = 1`` on (0, 1), ``u(0) = u(1) = 0``.

    The conductivity is ``k(x; g) = 1 + g * [x >= 1/2]``, integrated exactly
    per element.

    Parameters
    ----------
    n_elements : int
        Number of uniform elements (at least 2); the system has
        ``n_elements - 1`` interior unknowns.
    parameter_spec : see :func:`parse_quadrature`
    reference : {"midpoint", "identity", "mass"} or float
        Reference inner product: the stiffness matrix at the grid midpoint
        (default), the Euclidean product, the P1 mass matrix, or the
        stiffness matrix at the given parameter value.

    Returns
    -------
    op, rhs, grid
    """
    if int(n_elements) != n_elements or n_elements < 2:
        raise ConfigError(f"n_elements must be an integer >= 2, got {n_elements!r}")
    n_elements = int(n_elements)
    grid = parse_quadrature(parameter_spec)
    if grid.dim != 1:
        raise ConfigError("the diffusion benchmark takes a scalar parameter")
    h = 1.0 / n_elements
    frac = _right_fraction(n_elements)
    gammas = grid.nodes[:, 0]
    kappas = [1.0 + g * frac for g in gammas]
    if min(k.min() for k in kappas) <= 0:
        raise ConfigError("conductivity must stay positive on the parameter grid")
    forms = tuple(SymmetricForm(_p1_stiffness(k, h)) for k in kappas)

    lap = SymmetricForm(_p1_stiffness(np.ones(n_elements), h))
    if isinstance(reference, str) and reference == "midpoint":
        reference = float(grid.midpoint[0])
    if isinstance(reference, str):
        if reference == "identity":
            ref = identity_form(n_elements - 1)
        elif reference == "mass":
            ref = SymmetricForm(_p1_mass(n_elements))
        else:
            raise ConfigError(f"unknown reference inner product {reference!r}")
        kappa_min = min(k.min() for k in kappas)
        alpha = kappa_min * smallest_pencil_eigenvalue(lap, ref)
    else:
        kappa_ref = 1.0 + float(reference) * frac
        if kappa_ref.min() <= 0:
            raise ConfigError("reference conductivity must be positive")
        ref = SymmetricForm(_p1_stiffness(kappa_ref, h))
        # energy ratio is bounded below by the worst per-element ratio
        alpha = min(float(np.min(k / kappa_ref)) for k in kappas)
    alpha *= 1.0 - 1e-12
    ref.factor()
    op = ParametricOperator(forms, ref, alpha, labels={"generator": "diffusion_1d"})
    rhs = np.full((grid.n_nodes, n_elements - 1), h)
    return op, rhs, grid


def generate_random_spd_family(n, n_nodes, seed, gamma_independent=False, decay=None):
    """Seeded family ``A_q = M + g_q K`` with ``M`` SPD and ``K`` PSD.

    Nodes ``g_q`` are uniform on [0, 1] with weights ``1/n_nodes``; the
    reference inner product is Euclidean and ``alpha`` is the smallest
    eigenvalue of ``M``.

    With ``gamma_independent`` the ``K`` term is dropped.  With ``decay`` in
    (0, 1) the right-hand side is manufactured so that the solution field
    has singular values ``decay**j``, which gives well separated POD
    eigenvalues.
    """
    if n < 1 or n_nodes < 1:
        raise ConfigError("need n >= 1 and n_nodes >= 1")
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((n, n))
    M = G.T @ G / n + np.eye(n)
    r = max(1, n // 2)
    Hk = rng.standard_normal((r, n))
    K = Hk.T @ Hk / n
    gammas = np.sort(rng.uniform(0.0, 1.0, n_nodes))
    grid = ParameterGrid.uniform_weights(gammas)
    if gamma_independent:
        mats = [M for _ in gammas]
    else:
        mats = [M + g * K for g in gammas]
    forms = tuple(SymmetricForm(0.5 * (A + A.T)) for A in mats)
    alpha = float(np.linalg.eigvalsh(M)[0]) * (1.0 - 1e-12)
    op = ParametricOperator(forms, identity_form(n), alpha, labels={"generator": "random_spd"})
    if decay is None:
        rhs = rng.standard_normal((n_nodes, n))
    else:
        m = min(n, n_nodes)
        left = la.qr(rng.standard_normal((n_nodes, m)), mode="economic")[0]
        right = la.qr(rng.standard_normal((n, m)), mode="economic")[0]
        U = (left * decay ** np.arange(m)) @ right.T
        rhs = np.array([A.dot(u) for A, u in zip(forms, U)])
    return op, rhs, grid


# Bundle I/O -----------------------------------------------------------------

BUNDLE_FORMAT = "deflate-rom-problem/1"


def _fmt(x):
    return format(float(x), ".17g")


def save_problem(directory, op, rhs, grid):
    """Write ``grid.csv``, ``A_<q>.mtx``, ``reference.mtx``, ``f.mtx`` and ``meta``."""
    rhs = _check_rhs(op, rhs)
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "grid.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"gamma_{j}" for j in range(grid.dim)] + ["weight"])
        for node, w in zip(grid.nodes, grid.weights):
            writer.writerow([_fmt(x) for x in node] + [_fmt(w)])
    for q, A in enumerate(op.forms):
        write_form(d / f"A_{q}.mtx", A)
    write_form(d / "reference.mtx", op.reference)
    write_array(d / "f.mtx", rhs.T)
    meta = {
        "format": BUNDLE_FORMAT,
        "n": op.n,
        "n_nodes": op.n_nodes,
        "alpha": op.alpha,
        "reference": "reference.mtx",
        "labels": op.labels,
    }
    (d / "meta").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_problem(directory):
    """Inverse of :func:`save_problem`; returns ``(op, rhs, grid)``."""
    d = Path(directory)
    meta_path = d / "meta"
    if not meta_path.is_file():
        raise FileNotFoundError(f"no problem bundle at {d} (missing meta)")
    meta = json.loads(meta_path.read_text())
    with open(d / "grid.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    body = np.array([[float(x) for x in row] for row in rows[1:]])
    grid = ParameterGrid(body[:, :-1], body[:, -1])
    n_nodes = int(meta["n_nodes"])
    if grid.n_nodes != n_nodes:
        raise DimensionError("grid.csv and meta disagree on the node count")
    forms = tuple(read_form(d / f"A_{q}.mtx") for q in range(n_nodes))
    ref = read_form(d / meta.get("reference", "reference.mtx"))
    rhs = read_array(d / "f.mtx").T.copy()
    alpha = meta.get("alpha")
    op = ParametricOperator(forms, ref, alpha, labels=meta.get("labels", {}))
    return op, _check_rhs(op, rhs), grid
