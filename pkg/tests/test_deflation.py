import dataclasses

import numpy as np
import pytest

from deflate_rom.deflation import (
    DeflationTerm,
    _warm_starts,
    decay_diagnostic,
    deflate_step,
    empty_expansion,
    fit_decay,
    load_expansion,
    residual_energy,
    residual_rhs,
    run_deflation,
    save_expansion,
    verify_identities,
)
from deflate_rom.galerkin import energy, mean_form
from deflate_rom.parametric import generate_diffusion_1d, generate_random_spd_family, mean_operator, truth_solve
from deflate_rom.pod import pod_modes
from deflate_rom.subspace_opt import OptimizerOptions

from conftest import diag_family


def _run(op, F, grid, **kw):
    return run_deflation(op, grid, F, **kw)


def test_residual_rhs_examples():
    op, F, grid = generate_random_spd_family(6, 4, seed=0)
    e0 = residual_energy(op, grid, F)
    empty = empty_expansion(op, e0)
    np.testing.assert_array_equal(residual_rhs(op, F, empty), F)
    # an expansion reproducing the truth: one full-space term
    u = truth_solve(op, F)
    term = DeflationTerm(basis=np.eye(6), coefficients=u, step_energy=e0)
    full = dataclasses.replace(empty, terms=(term,), residual_energies=(e0, 0.0))
    assert np.abs(residual_rhs(op, F, full)).max() <= 1e-10 * np.abs(F).max()
    # one deflation term, unrolled per node
    one = deflate_step(op, grid, F, empty)
    fhat = residual_rhs(op, F, one)
    s1 = one.terms[0].materialize()
    z = np.random.default_rng(1).standard_normal(6)
    for q, A in enumerate(op.forms):
        assert fhat[q] @ z == pytest.approx(F[q] @ z - s1[q] @ A.dot(z), rel=1e-12, abs=1e-12)


def test_singleton_grid_one_step_exact():
    op, F, grid = generate_random_spd_family(10, 1, seed=3)
    e0 = residual_energy(op, grid, F)
    exp = deflate_step(op, grid, F, empty_expansion(op, e0))
    assert exp.residual_energies[1] <= 1e-10 * e0
    u = truth_solve(op, F)
    assert energy(op, grid, u - exp.field()) <= 1e-10 * e0


def test_gamma_independent_step_energies_are_pod_eigenvalues():
    op, F, grid = generate_random_spd_family(12, 8, seed=21, gamma_independent=True, decay=0.6)
    u = truth_solve(op, F)
    pod = pod_modes(u, grid, op.forms[0], 8)
    exp = _run(op, F, grid, tol=1e-300, max_steps=8, options=OptimizerOptions(tol=1e-12))
    np.testing.assert_allclose(exp.step_energies, pod.eigenvalues, rtol=1e-8)


def test_zero_data():
    op, F, grid = diag_family(rhs=(0.0, 0.0))
    exp = _run(op, F, grid)
    assert exp.terms == () and exp.converged and exp.initial_energy == 0.0
    assert exp.residual_energies == (0.0,)


def _brute_force_deflation(op, F, grid, steps, n_angles=2 * 10 ** 6):
    """Rank-one deflation of a 2-D problem with the optimal direction taken
    from a scan of ``n_angles`` angles; returns relative residual energies."""
    th = np.linspace(0.0, np.pi, n_angles, endpoint=False)
    Z = np.stack([np.cos(th), np.sin(th)])
    mats = [A.toarray() for A in op.forms]
    fh = F.copy()
    e0 = sum(w * f @ np.linalg.solve(M, f) for w, f, M in zip(grid.weights, F, mats))
    out = [1.0]
    for _ in range(steps):
        J = sum(w * (f @ Z) ** 2 / np.einsum("ij,ij->j", Z, M @ Z) for w, f, M in zip(grid.weights, fh, mats))
        z = Z[:, np.argmax(J)]
        for q, M in enumerate(mats):
            fh[q] = fh[q] - (fh[q] @ z) / (z @ M @ z) * (M @ z)
        out.append(sum(w * f @ np.linalg.solve(M, f) for w, f, M in zip(grid.weights, fh, mats)) / e0)
    return np.array(out)


def test_diag_example_converges():
    op, F, grid = diag_family()
    exp = _run(op, F, grid, tol=1e-10, max_steps=10)
    r = np.array(exp.residual_energies) / exp.initial_energy
    assert exp.converged and r[-1] <= 1e-10
    assert np.all(np.diff(r) < 0)
    # the per-node orthogonal complements differ, so each step only removes a
    # fixed fraction of the residual; compare with the brute-force sequence
    # (the angle spacing of 1.6e-6 limits the oracle to about 1e-5 relative)
    oracle = _brute_force_deflation(op, F, grid, len(exp.terms))
    np.testing.assert_allclose(r, oracle, rtol=1e-5, atol=1e-14)
    assert r[1] <= oracle[1] * (1 + 1e-12)
    assert len(exp.terms) == 7
    u = truth_solve(op, F)
    assert energy(op, grid, u - exp.field()) <= 1e-10 * exp.initial_energy
    rep = verify_identities(op, grid, F, exp, u)
    assert max(rep.worst().values()) <= 1e-11
    # with the default budget of 2 n steps the run stops early
    capped = _run(op, F, grid, tol=1e-10)
    assert len(capped.terms) == 4 and capped.stop_reason == "max_steps"


def test_diffusion_benchmark_run():
    op, F, grid = generate_diffusion_1d(64)
    exp = _run(op, F, grid, tol=1e-6, max_steps=64)
    r = np.array(exp.residual_energies)
    assert np.all(np.diff(r) < 0)
    assert r[-1] <= 1e-6 * r[0] and len(exp.terms) <= 64
    fit = decay_diagnostic(exp)
    assert fit.slope is not None and fit.slope < 0


@pytest.mark.parametrize("k", [1, 2, 3])
def test_identities_random_family(k, backend):
    op, F, grid = generate_random_spd_family(8, 6, seed=30 + k)
    exp = _run(op, F, grid, k=k, tol=1e-12, check_every=1)
    u = truth_solve(op, F)
    rep = verify_identities(op, grid, F, exp, u)
    assert rep.passed(1e-10), rep.worst()
    for dg in exp.diagnostics:
        assert abs(dg.residual_energy_direct - dg.residual_energy) <= 1e-10 * exp.initial_energy
    for term in exp.terms:
        s = term.materialize()
        assert term.step_energy == pytest.approx(mean_form(op, grid, s, s), rel=1e-12)
        assert term.step_energy >= 0


def test_orthogonality_against_random_span_fields():
    op, F, grid = generate_random_spd_family(9, 5, seed=44)
    exp = _run(op, F, grid, tol=1e-12)
    u = truth_solve(op, F)
    rng = np.random.default_rng(0)
    e = u.copy()
    for term in exp.terms:
        e = e - term.materialize()
        for _ in range(3):
            v = rng.standard_normal((grid.n_nodes, term.k)) @ term.basis.T
            scale = np.sqrt(energy(op, grid, v) * exp.initial_energy)
            assert abs(mean_form(op, grid, e, v)) <= 1e-9 * scale


def test_truncated_prefix_balances():
    op, F, grid = generate_random_spd_family(7, 5, seed=2)
    exp = _run(op, F, grid, tol=1e-12)
    u = truth_solve(op, F)
    for m in range(len(exp.terms) + 1):
        rep = verify_identities(op, grid, F, exp.truncated(m), u)
        assert len(rep.ledger) == m + 1
        assert rep.passed(1e-10)


def test_perturbation_is_detected():
    op, F, grid = generate_random_spd_family(4, 3, seed=5)
    exp = _run(op, F, grid, tol=1e-12)
    u = truth_solve(op, F)
    assert verify_identities(op, grid, F, exp, u).passed(1e-11)
    rng = np.random.default_rng(0)
    t = exp.terms[0]
    bad = DeflationTerm(t.basis, t.coefficients * (1 + 1e-3 * rng.standard_normal(t.coefficients.shape)),
                        t.step_energy)
    broken = dataclasses.replace(exp, terms=(bad,) + exp.terms[1:])
    rep = verify_identities(op, grid, F, broken, u)
    assert rep.orthogonality[1] > 1e-5
    assert not rep.passed(1e-9)


def test_stop_reasons():
    op, F, grid = generate_random_spd_family(10, 8, seed=1)
    capped = _run(op, F, grid, max_steps=2)
    assert capped.stop_reason == "max_steps" and not capped.converged and len(capped.terms) == 2
    done = _run(op, F, grid, tol=1e-3)
    assert done.stop_reason == "tolerance" and done.converged
    assert len(_run(op, F, grid, tol=1e-300).terms) <= 2 * op.n


def test_residual_only_driver_matches_truth():
    op, F, grid = generate_diffusion_1d(20, {"kind": "gauss", "n": 9})
    exp = _run(op, F, grid, tol=1e-10)
    u = truth_solve(op, F)
    rep = verify_identities(op, grid, F, exp, u)
    gaps = np.abs(np.array(rep.residual_energies) - np.array(exp.residual_energies))
    assert gaps.max() <= 1e-10 * exp.initial_energy


def test_warm_start_is_abar_orthogonal():
    op, F, grid = generate_random_spd_family(10, 8, seed=3)
    exp = _run(op, F, grid, max_steps=3)
    warm = _warm_starts(op, grid, exp)
    if warm:
        abar = mean_operator(op, grid)
        B = exp.basis()
        v = warm[0]
        assert np.abs(B.T @ abar.dot(v)).max() <= 1e-10 * np.sqrt(v @ abar.dot(v)) * np.abs(B).max() * 10


def test_deflate_step_on_zero_residual_sets_converged():
    op, F, grid = generate_random_spd_family(5, 1, seed=0)
    exp = _run(op, F, grid, tol=1e-300)
    again = deflate_step(op, grid, F, exp)
    assert again.converged and len(again.terms) == len(exp.terms)


# decay -----------------------------------------------------------------------

def test_fit_decay_examples():
    fit = fit_decay([1.0, 0.25, 0.0625])
    assert fit.rho == pytest.approx(2.0, rel=1e-10)
    assert fit.rate == pytest.approx(np.log(2.0), rel=1e-10)
    assert [r[0] for r in fit.rows] == [1, 2, 3]
    flat = fit_decay([3.0, 3.0, 3.0, 3.0])
    assert flat.rate == pytest.approx(0.0, abs=1e-14)
    short = fit_decay([1.0, 0.5])
    assert short.slope is None and short.rate is None


# serialization ---------------------------------------------------------------

@pytest.mark.parametrize("k", [1, 2])
def test_expansion_roundtrip(tmp_path, k):
    op, F, grid = generate_random_spd_family(6, 5, seed=k)
    exp = _run(op, F, grid, k=k, tol=1e-10)
    save_expansion(tmp_path, exp)
    back = load_expansion(tmp_path)
    assert back.residual_energies == exp.residual_energies
    assert back.stop_reason == exp.stop_reason and back.converged == exp.converged
    for a, b in zip(exp.terms, back.terms):
        np.testing.assert_array_equal(a.basis, b.basis)
        np.testing.assert_array_equal(a.coefficients, b.coefficients)
    u = truth_solve(op, F)
    assert verify_identities(op, grid, F, back, u).passed(1e-10)
    with pytest.raises(FileNotFoundError):
        load_expansion(tmp_path / "missing")
