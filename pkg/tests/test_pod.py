import numpy as np
import pytest
import scipy.linalg as la

from deflate_rom.deflation import run_deflation
from deflate_rom.errors import NotPositiveDefiniteError
from deflate_rom.galerkin import energy, principal_angles
from deflate_rom.hilbert import SymmetricForm, identity_form
from deflate_rom.parametric import ParameterGrid, generate_diffusion_1d, generate_random_spd_family, truth_solve
from deflate_rom.pod import load_pod, pod_error_curve, pod_modes, save_pod
from deflate_rom.subspace_opt import OptimizerOptions

from conftest import random_spd


def test_two_orthogonal_snapshots():
    grid = ParameterGrid([0.0, 1.0], [1.0, 1.0])
    pod = pod_modes(np.array([[2.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), grid, identity_form(3), 2)
    np.testing.assert_allclose(pod.eigenvalues, [4.0, 1.0], rtol=1e-14)
    np.testing.assert_allclose(pod.modes, [[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]], atol=1e-15)


def test_identical_snapshots():
    rng = np.random.default_rng(0)
    inner = SymmetricForm(random_spd(rng, 5))
    u = rng.standard_normal(5)
    grid = ParameterGrid([0.0, 1.0, 2.0, 3.0], [0.5, 0.25, 1.0, 0.25])
    pod = pod_modes(np.tile(u, (4, 1)), grid, inner, 4)
    assert pod.eigenvalues[0] == pytest.approx(2.0 * (u @ inner.dot(u)), rel=1e-12)
    assert np.all(np.abs(pod.eigenvalues[1:]) <= 1e-12)
    np.testing.assert_allclose(pod.modes.T @ inner.dot(pod.modes), np.eye(4), atol=1e-10)


def test_k_zero_and_errors():
    grid = ParameterGrid([0.0, 1.0], [1.0, 1.0])
    U = np.eye(3)[:2]
    assert pod_modes(U, grid, identity_form(3), 0).modes.shape == (3, 0)
    with pytest.raises(ValueError):
        pod_modes(U, grid, identity_form(3), 3)
    with pytest.raises(NotPositiveDefiniteError):
        pod_modes(U, grid, SymmetricForm(np.diag([1.0, -1.0, 1.0])), 1)


@pytest.mark.parametrize("inner_kind", ["identity", "random"])
def test_trace_orthonormality_and_order(inner_kind):
    op, F, grid = generate_random_spd_family(7, 10, seed=4)
    U = truth_solve(op, F)
    rng = np.random.default_rng(1)
    inner = identity_form(7) if inner_kind == "identity" else SymmetricForm(random_spd(rng, 7))
    pod = pod_modes(U, grid, inner, 7)
    trace = sum(w * u @ inner.dot(u) for w, u in zip(grid.weights, U))
    assert pod.eigenvalues.sum() == pytest.approx(trace, rel=1e-10)
    assert np.all(np.diff(pod.eigenvalues) <= 0) and pod.eigenvalues.min() >= -1e-12
    np.testing.assert_allclose(pod.modes.T @ inner.dot(pod.modes), np.eye(7), atol=1e-10)
    # oracle: eigenvalues of the n x n operator L^T U^T W U L
    L = np.linalg.cholesky(inner.toarray())
    K = L.T @ U.T @ (grid.weights[:, None] * U) @ L
    np.testing.assert_allclose(pod.eigenvalues, np.linalg.eigvalsh(K)[::-1], rtol=1e-10, atol=1e-14)


def test_error_curve_endpoints_and_monotone():
    op, F, grid = generate_random_spd_family(6, 8, seed=2)
    U = truth_solve(op, F)
    pod = pod_modes(U, grid, op.reference, 6)
    curve = pod_error_curve(pod, op, grid, F, U)
    e0 = energy(op, grid, U)
    assert len(curve) == 7
    assert curve[0] == pytest.approx(e0, rel=1e-15)
    assert curve[-1] <= 1e-12 * e0
    assert all(b <= a + 1e-12 * e0 for a, b in zip(curve, curve[1:]))


def test_diffusion_curve_monotone():
    op, F, grid = generate_diffusion_1d(32, {"kind": "gauss", "n": 12})
    U = truth_solve(op, F)
    pod = pod_modes(U, grid, op.reference, 8)
    curve = pod_error_curve(pod, op, grid, F, U)
    assert all(b <= a + 1e-12 * curve[0] for a, b in zip(curve, curve[1:]))


def test_gamma_independent_matches_deflation():
    op, F, grid = generate_random_spd_family(14, 10, seed=5, gamma_independent=True, decay=0.6)
    U = truth_solve(op, F)
    A = op.forms[0]
    pod = pod_modes(U, grid, A, 8)
    curve = pod_error_curve(pod, op, grid, F, U)
    tail = [pod.eigenvalues[m:].sum() + (np.inf if False else 0.0) for m in range(9)]
    full = pod_modes(U, grid, A, 10).eigenvalues
    tail = [full[m:].sum() for m in range(9)]
    np.testing.assert_allclose(curve, tail, rtol=1e-8)
    exp = run_deflation(op, grid, F, tol=1e-300, max_steps=8, options=OptimizerOptions(tol=1e-12))
    np.testing.assert_allclose(exp.residual_energies, curve, rtol=1e-8)
    B = exp.basis()
    for m in range(1, 9):
        assert principal_angles(B[:, :m], pod.first(m), A).max() <= 1e-6


def test_degenerate_block_compared_as_subspace():
    # two equal singular values: individual modes are arbitrary, the block is not
    n = 6
    rng = np.random.default_rng(3)
    Q = la.qr(rng.standard_normal((n, 3)), mode="economic")[0]
    P = la.qr(rng.standard_normal((4, 3)), mode="economic")[0]
    U = (P * np.array([2.0, 1.0, 1.0])) @ Q.T
    grid = ParameterGrid(np.arange(4.0), np.ones(4))
    pod = pod_modes(U, grid, identity_form(n), 3)
    np.testing.assert_allclose(pod.eigenvalues, [4.0, 1.0, 1.0], rtol=1e-12)
    assert principal_angles(pod.modes[:, 1:3], Q[:, 1:3], identity_form(n)).max() <= 1e-10


def test_save_load_roundtrip(tmp_path):
    op, F, grid = generate_random_spd_family(5, 6, seed=0)
    U = truth_solve(op, F)
    pod = pod_modes(U, grid, op.reference, 4)
    save_pod(tmp_path / "pod", pod)
    back = load_pod(tmp_path / "pod")
    np.testing.assert_array_equal(back.modes, pod.modes)
    np.testing.assert_array_equal(back.eigenvalues, pod.eigenvalues)
