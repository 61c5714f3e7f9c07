"""Deflation: successive optimal corrections of the current residual.

Starting from ``u_0 = 0``, step ``i`` finds an optimal rank-k subspace for
the residual ``e_{i-1} = u - u_{i-1}`` and adds the Galerkin projection
``s_i`` of the residual on it.  The residual is only accessed through its
right-hand side ``f_hat = f - A u_{i-1}``, so the solution itself is never
needed.  The expansion is kept in separated form: one basis block and one
coefficient field per term.
"""

import csv
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DimensionError
from .galerkin import mean_form, output_functional
from .hilbert import read_array, write_array
from .parametric import mean_operator, truth_solve
from .subspace_opt import OptimizerOptions, rank1_maximize, rankk_minimize

__all__ = [
    "DeflationTerm",
    "DeflationExpansion",
    "StepDiagnostics",
    "IdentityReport",
    "DecayFit",
    "empty_expansion",
    "residual_rhs",
    "residual_energy",
    "deflate_step",
    "run_deflation",
    "verify_identities",
    "decay_diagnostic",
    "fit_decay",
    "save_expansion",
    "load_expansion",
]

log = logging.getLogger(__name__)

# residual energy (relative to the initial one) treated as numerically zero
ZERO_RESIDUAL = 1e-14
STAGNATION_STEPS = 3


@dataclass(frozen=True)
class DeflationTerm:
    """One correction ``s_i(q) = basis @ coefficients[q]``."""

    basis: np.ndarray
    coefficients: np.ndarray
    step_energy: float

    @property
    def k(self):
        return self.basis.shape[1]

    def materialize(self):
        return self.coefficients @ self.basis.T


@dataclass(frozen=True)
class StepDiagnostics:
    step: int
    step_energy: float
    residual_energy: float
    wall_ms: float
    optimizer: dict = field(default_factory=dict)
    residual_energy_direct: float | None = None


@dataclass(frozen=True)
class DeflationExpansion:
    """Separated expansion ``u_m = sum_i s_i`` with its energy ledger.

    ``residual_energies[i]`` is the mean energy of ``e_i``; index 0 holds the
    initial energy, so there is one more entry than there are terms.
    """

    n: int
    n_nodes: int
    initial_energy: float
    terms: tuple = ()
    residual_energies: tuple = ()
    diagnostics: tuple = ()
    converged: bool = False
    stop_reason: str = ""

    def __post_init__(self):
        if not self.residual_energies:
            object.__setattr__(self, "residual_energies", (float(self.initial_energy),))
        if len(self.residual_energies) != len(self.terms) + 1:
            raise ValueError("residual_energies must have one entry more than terms")

    def __len__(self):
        return len(self.terms)

    @property
    def step_energies(self):
        return tuple(t.step_energy for t in self.terms)

    def field(self, upto=None):
        """Materialized ``u_m`` (``m = upto`` terms, all by default)."""
        out = np.zeros((self.n_nodes, self.n))
        for term in self.terms[:upto]:
            out += term.materialize()
        return out

    def basis(self):
        """All term bases side by side, shape ``(n, sum of k_i)``."""
        if not self.terms:
            return np.zeros((self.n, 0))
        return np.column_stack([t.basis for t in self.terms])

    def truncated(self, m):
        """The expansion after its first ``m`` steps."""
        return replace(
            self,
            terms=self.terms[:m],
            residual_energies=self.residual_energies[: m + 1],
            diagnostics=self.diagnostics[:m],
        )


def empty_expansion(op, initial_energy):
    return DeflationExpansion(n=op.n, n_nodes=op.n_nodes, initial_energy=float(initial_energy))


def residual_rhs(op, rhs, expansion):
    """``f_hat(q) = f_q - A_q u_m(q)`` for the current expansion."""
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape != (op.n_nodes, op.n):
        raise DimensionError(f"rhs shape {rhs.shape} != {(op.n_nodes, op.n)}")
    if not expansion.terms:
        return rhs.copy()
    return rhs - op.apply(expansion.field())


def residual_energy(op, grid, fhat, threads=1):
    """``abar(e, e)`` for the field ``e`` solving ``A_q e_q = fhat_q``."""
    return output_functional(fhat, grid, truth_solve(op, fhat, threads=threads))


def _step_options(options, step, warm):
    extra = tuple(options.extra_starts) + tuple(warm)
    return replace(options, seed=options.seed + step, extra_starts=extra)


def _warm_starts(op, grid, expansion):
    """Runner-up stationary direction of the previous step, made mean-energy
    orthogonal to the accumulated bases."""
    if not expansion.diagnostics:
        return ()
    alts = expansion.diagnostics[-1].optimizer.get("alternatives", ())
    if not alts:
        return ()
    v = np.array(alts[0], dtype=float)
    abar = mean_operator(op, grid)
    B = expansion.basis()
    AB = abar.dot(B)
    gram = B.T @ AB
    v -= B @ np.linalg.lstsq(gram, AB.T @ v, rcond=None)[0]
    if np.linalg.norm(v) <= 1e-8 * np.linalg.norm(alts[0]):
        return ()
    return (v,)


def deflate_step(op, grid, rhs, expansion, k=1, options=None, check=False, threads=1):
    """Append one optimal rank-``k`` correction; returns a new expansion.

    The residual energy is updated by the recurrence
    ``abar(e_i, e_i) = abar(e_{i-1}, e_{i-1}) - abar(s_i, s_i)``.  With
    ``check`` the residual energy is also evaluated directly from the new
    residual right-hand side and stored in the step diagnostics.

    If the current residual energy is below ``1e-14`` times the initial
    energy, the expansion is returned unchanged with ``converged`` set.
    """
    options = options or OptimizerOptions()
    e_prev = expansion.residual_energies[-1]
    if expansion.initial_energy <= 0.0 or e_prev < ZERO_RESIDUAL * expansion.initial_energy:
        return replace(expansion, converged=True, stop_reason="residual numerically zero")
    step = len(expansion.terms) + 1
    t0 = time.perf_counter()
    fhat = residual_rhs(op, rhs, expansion)
    opts = _step_options(options, step, _warm_starts(op, grid, expansion) if k == 1 else ())
    if k == 1:
        cand = rank1_maximize(op, grid, fhat, opts)
        w_dir = cand.direction
        den = op.matvec(w_dir) @ w_dir
        phi = (fhat @ w_dir) / den
        basis = w_dir[:, None].copy()
        coeffs = phi[:, None]
        step_energy = float(np.dot(grid.weights, phi * phi * den))
        info = {
            "objective": cand.objective,
            "stationarity_residual": cand.stationarity_residual,
            "starts_used": cand.starts_used,
            "iterations": cand.iterations,
            "stationary_values": cand.stationary_values,
            "alternatives": cand.alternatives,
        }
    else:
        cand = rankk_minimize(op, grid, fhat, k, opts, total_energy=e_prev)
        basis, coeffs = cand.basis, cand.coefficients
        step_energy = output_functional(fhat, grid, coeffs @ basis.T)
        info = {
            "objective": cand.objective,
            "sweeps_used": cand.sweeps_used,
            "converged": cand.converged,
        }
    e_new = e_prev - step_energy
    term = DeflationTerm(basis=basis, coefficients=coeffs, step_energy=float(step_energy))
    direct = None
    if check:
        direct = residual_energy(op, grid, fhat - op.apply(term.materialize()), threads=threads)
        drift = abs(direct - e_new)
        if drift > 1e-8 * expansion.initial_energy:
            log.warning("step %d: ledger drift %.3e (direct %.6e, ledger %.6e)", step, drift, direct, e_new)
    diag = StepDiagnostics(
        step=step,
        step_energy=float(step_energy),
        residual_energy=float(e_new),
        wall_ms=1e3 * (time.perf_counter() - t0),
        optimizer=info,
        residual_energy_direct=direct,
    )
    return replace(
        expansion,
        terms=expansion.terms + (term,),
        residual_energies=expansion.residual_energies + (float(e_new),),
        diagnostics=expansion.diagnostics + (diag,),
    )


def run_deflation(op, grid, rhs, k=1, tol=1e-8, max_steps=None, options=None,
                  check_every=10, initial_energy=None, threads=1):
    """Deflate until ``residual <= tol * initial`` or ``max_steps`` terms.

    ``max_steps`` defaults to ``2 n``.  The loop also stops when the step
    energy stays below ``1e-14`` of the initial energy for three consecutive
    steps.  ``initial_energy`` is ``abar(u, u)``; when omitted it is computed
    from per-node solves of the data.
    """
    rhs = np.asarray(rhs, dtype=float)
    if max_steps is None:
        max_steps = 2 * op.n
    if initial_energy is None:
        initial_energy = residual_energy(op, grid, rhs, threads=threads)
    expansion = empty_expansion(op, initial_energy)
    if not np.any(rhs) or initial_energy <= 0.0:
        return replace(expansion, converged=True, stop_reason="zero data")
    small = 0
    while True:
        if expansion.residual_energies[-1] <= tol * initial_energy:
            return replace(expansion, converged=True, stop_reason="tolerance")
        if len(expansion.terms) >= max_steps:
            return replace(expansion, converged=False, stop_reason="max_steps")
        step = len(expansion.terms) + 1
        check = bool(check_every) and step % check_every == 0
        expansion = deflate_step(op, grid, rhs, expansion, k, options, check=check, threads=threads)
        if expansion.converged:
            return expansion
        if expansion.terms[-1].step_energy < ZERO_RESIDUAL * initial_energy:
            small += 1
            if small >= STAGNATION_STEPS:
                return replace(expansion, converged=False, stop_reason="stagnation")
        else:
            small = 0


@dataclass(frozen=True)
class IdentityReport:
    """Per-step identity residuals, all relative to the initial energy.

    ``orthogonality[i]`` is ``|abar(e_i, s_i)|``, ``ledger[i]`` the imbalance
    of ``abar(e_i, e_i) + sum_{j<=i} abar(s_j, s_j) - abar(e_0, e_0)``,
    ``duality[i]`` the gap between ``abar(e_i, e_i)`` and
    ``abar(e_{i-1}, e_{i-1}) - sum_q w_q <f_hat_i, s_i>`` and ``energy_gap[i]``
    the gap between the recomputed and the tracked residual energy.  Entry 0
    refers to the initial state.  ``residual_energies`` holds the recomputed
    (absolute) values of ``abar(e_i, e_i)``.
    """

    orthogonality: tuple
    ledger: tuple
    duality: tuple
    energy_gap: tuple
    residual_energies: tuple
    initial_energy: float

    NAMES = ("orthogonality", "ledger", "duality", "energy_gap")

    def worst(self):
        return {name: max(getattr(self, name), default=0.0) for name in self.NAMES}

    def failures(self, tol=1e-9):
        return [name for name, value in self.worst().items() if not value <= tol]

    def passed(self, tol=1e-9):
        return not self.failures(tol)


def verify_identities(op, grid, rhs, expansion, truth):
    """Recompute the deflation identities from the truth field."""
    truth = np.asarray(truth, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    e0 = mean_form(op, grid, truth, truth)
    if e0 <= 0.0:
        zeros = (0.0,) * (len(expansion.terms) + 1)
        gap0 = abs(expansion.initial_energy)
        return IdentityReport(zeros, zeros, zeros, (gap0,) + zeros[1:], zeros, 0.0)
    orth = [0.0]
    ledger = [0.0]
    duality = [0.0]
    gaps = [abs(e0 - expansion.residual_energies[0]) / e0]
    energies = [e0]
    e = truth.copy()
    fhat = rhs.copy()
    steps_sum = 0.0
    prev = e0
    for i, term in enumerate(expansion.terms, start=1):
        s = term.materialize()
        e = e - s
        steps_sum += mean_form(op, grid, s, s)
        ee = mean_form(op, grid, e, e)
        orth.append(abs(mean_form(op, grid, e, s)) / e0)
        ledger.append(abs(ee + steps_sum - e0) / e0)
        duality.append(abs(ee - (prev - output_functional(fhat, grid, s))) / e0)
        gaps.append(abs(ee - expansion.residual_energies[i]) / e0)
        energies.append(ee)
        fhat = fhat - op.apply(s)
        prev = ee
    return IdentityReport(tuple(orth), tuple(ledger), tuple(duality), tuple(gaps),
                          tuple(energies), e0)


@dataclass(frozen=True)
class DecayFit:
    """Least-squares fit ``log E_i ~ a + slope * i``.

    If step norms behave like ``rho**-i`` then energies behave like
    ``rho**(-2 i)``, so ``rho = exp(-slope / 2)`` and ``rate = log(rho)``.
    """

    rows: tuple
    slope: float | None
    rho: float | None
    rate: float | None


def fit_decay(energies, start=1):
    """Fit the decay of a positive energy sequence indexed from ``start``."""
    energies = [float(e) for e in energies]
    idx = [start + j for j in range(len(energies))]
    usable = [(i, e) for i, e in zip(idx, energies) if e > 0.0]
    slope = rho = rate = None
    if len(energies) >= 3 and len(usable) >= 2:
        x = np.array([i for i, _ in usable], dtype=float)
        y = np.log([e for _, e in usable])
        slope = float(np.polyfit(x, y, 1)[0])
        rate = -0.5 * slope
        rho = float(np.exp(rate))
    rows = tuple((i, e, rate) for i, e in zip(idx, energies))
    return DecayFit(rows=rows, slope=slope, rho=rho, rate=rate)


def decay_diagnostic(expansion):
    """Decay fit of the step energies; ``slope`` is None below three terms."""
    return fit_decay(expansion.step_energies)


# Serialization --------------------------------------------------------------

EXPANSION_FORMAT = "deflate-rom-expansion/1"


def save_expansion(directory, expansion):
    """Write ``meta``, ``B_<i>.mtx`` and ``c_<i>.csv`` (i from 1)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for old in list(d.glob("B_*.mtx")) + list(d.glob("c_*.csv")):
        old.unlink()
    for i, term in enumerate(expansion.terms, start=1):
        write_array(d / f"B_{i}.mtx", term.basis)
        with open(d / f"c_{i}.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["node"] + [f"c_{j}" for j in range(term.k)])
            for q, row in enumerate(term.coefficients):
                writer.writerow([q] + [format(float(x), ".17g") for x in row])
    meta = {
        "format": EXPANSION_FORMAT,
        "n": expansion.n,
        "n_nodes": expansion.n_nodes,
        "k": [t.k for t in expansion.terms],
        "initial_energy": expansion.initial_energy,
        "step_energies": list(expansion.step_energies),
        "residual_energies": list(expansion.residual_energies),
        "converged": expansion.converged,
        "stop_reason": expansion.stop_reason,
    }
    (d / "meta").write_text(json.dumps(meta, indent=2) + "\n")


def load_expansion(directory):
    d = Path(directory)
    meta_path = d / "meta"
    if not meta_path.is_file():
        raise FileNotFoundError(f"no expansion at {d} (missing meta)")
    meta = json.loads(meta_path.read_text())
    terms = []
    for i, (k, energy) in enumerate(zip(meta["k"], meta["step_energies"]), start=1):
        basis = read_array(d / f"B_{i}.mtx").reshape(meta["n"], k)
        with open(d / f"c_{i}.csv", newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        coeffs = np.array([[float(x) for x in row[1:]] for row in rows]).reshape(meta["n_nodes"], k)
        terms.append(DeflationTerm(basis=basis, coefficients=coeffs, step_energy=float(energy)))
    return DeflationExpansion(
        n=int(meta["n"]),
        n_nodes=int(meta["n_nodes"]),
        initial_energy=float(meta["initial_energy"]),
        terms=tuple(terms),
        residual_energies=tuple(float(e) for e in meta["residual_energies"]),
        converged=bool(meta.get("converged", False)),
        stop_reason=meta.get("stop_reason", ""),
    )
