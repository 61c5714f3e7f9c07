import numpy as np
import pytest
import scipy.linalg as la
from hypothesis import given, settings, strategies as st

from deflate_rom.errors import DimensionError, SingularSystemError
from deflate_rom.galerkin import (
    as_basis,
    energy,
    field_rank,
    galerkin_solve,
    mean_error,
    mean_form,
    output_functional,
    principal_angles,
)
from deflate_rom.hilbert import SymmetricForm, apply_form, identity_form
from deflate_rom.parametric import ParameterGrid, ParametricOperator, generate_random_spd_family, truth_solve

from conftest import diag_family, random_spd


def test_mean_form_examples(diag_example):
    op, F, grid = diag_example
    ones = np.ones((2, 2))
    assert mean_form(op, grid, ones, ones) == pytest.approx(2.5, rel=1e-15)
    assert mean_form(op, grid, np.zeros((2, 2)), ones) == 0.0
    single, _, g1 = diag_family(gammas=[3.0], weights=[1.0])
    v = np.array([[1.0, 2.0]])
    w = np.array([[-1.0, 0.5]])
    assert mean_form(single, g1, v, w) == apply_form(single.forms[0], v[0], w[0])


def test_mean_form_shape_check(diag_example):
    op, F, grid = diag_example
    with pytest.raises(DimensionError):
        mean_form(op, grid, np.ones((3, 2)), np.ones((3, 2)))


def test_galerkin_diag_e1(diag_example, backend):
    op, F, grid = diag_example
    uZ, c = galerkin_solve([[1.0, 0.0]], op, F)
    np.testing.assert_allclose(uZ, [[1.0, 0.0], [1.0, 0.0]], rtol=1e-15)
    np.testing.assert_allclose(c, [[1.0], [1.0]], rtol=1e-15)
    u = truth_solve(op, F)
    err = mean_error(op, grid, u, uZ)
    assert err == pytest.approx(energy(op, grid, u) - output_functional(F, grid, uZ), rel=1e-12)
    # hand values: u = {(1,1),(1,1/2)}, error = 1/2*1 + 1/2*2*(1/4) = 0.75
    assert err == pytest.approx(0.75, rel=1e-15)


def test_galerkin_full_space_and_null_space(backend):
    op, F, grid = generate_random_spd_family(7, 5, seed=4)
    u = truth_solve(op, F)
    uZ, c = galerkin_solve(np.eye(7), op, F)
    np.testing.assert_allclose(uZ, u, rtol=0, atol=1e-10 * np.abs(u).max())
    assert mean_error(op, grid, u, uZ) <= 1e-16 * energy(op, grid, u) * 100
    z, c0 = galerkin_solve(None, op, F)
    assert z.shape == (5, 7) and c0.shape == (5, 0) and not np.any(z)
    assert mean_error(op, grid, u, u) == 0.0


def test_output_functional_examples():
    op, F, grid = generate_random_spd_family(6, 4, seed=8)
    u = truth_solve(op, F)
    assert output_functional(F, grid, np.zeros_like(F)) == 0.0
    assert output_functional(F, grid, u) == pytest.approx(energy(op, grid, u), rel=1e-12)


def _random_setup(seed, k):
    op, F, grid = generate_random_spd_family(10, 6, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    B = rng.standard_normal((10, k))
    return op, F, grid, B, rng


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 4))
def test_galerkin_orthogonality_duality_best_approx(seed, k):
    op, F, grid, B, rng = _random_setup(seed, k)
    u = truth_solve(op, F)
    uZ, c = galerkin_solve(B, op, F)
    np.testing.assert_allclose(c @ B.T, uZ, rtol=1e-12, atol=1e-14)
    e0 = energy(op, grid, u)
    err = mean_error(op, grid, u, uZ)
    # duality
    assert abs(err - (e0 - output_functional(F, grid, uZ))) <= 1e-12 * e0
    assert output_functional(F, grid, uZ) == pytest.approx(mean_form(op, grid, uZ, uZ), rel=1e-12)
    # orthogonality against random fields in span(B)
    for _ in range(5):
        z = rng.standard_normal((grid.n_nodes, k)) @ B.T
        scale = np.sqrt(e0 * energy(op, grid, z))
        assert abs(mean_form(op, grid, u - uZ, z)) <= 1e-10 * scale
    # best approximation, globally and per node
    for _ in range(20):
        z = uZ + 0.1 * rng.standard_normal((grid.n_nodes, k)) @ B.T
        assert mean_error(op, grid, u, z) >= err - 1e-12 * e0
        for q, A in enumerate(op.forms):
            d0, d1 = u[q] - uZ[q], u[q] - z[q]
            assert apply_form(A, d0, d0) <= apply_form(A, d1, d1) + 1e-12 * apply_form(A, u[q], u[q])


def test_monotone_under_inclusion():
    op, F, grid, B, rng = _random_setup(3, 6)
    u = truth_solve(op, F)
    errs = [mean_error(op, grid, u, galerkin_solve(B[:, :m], op, F)[0]) for m in range(7)]
    assert all(b <= a + 1e-12 * errs[0] for a, b in zip(errs, errs[1:]))


def test_ill_conditioned_basis_reorthonormalized():
    op, F, grid = generate_random_spd_family(8, 3, seed=1)
    rng = np.random.default_rng(0)
    V = rng.standard_normal((8, 2))
    B = np.column_stack([V[:, 0], V[:, 0] + 1e-7 * V[:, 1]])  # Gram condition ~1e14
    uZ, c = galerkin_solve(B, op, F)
    ref, _ = galerkin_solve(la.orth(V), op, F)
    np.testing.assert_allclose(uZ, ref, rtol=0, atol=1e-8 * np.abs(ref).max())
    np.testing.assert_allclose(c @ B.T, uZ, rtol=0, atol=1e-6 * np.abs(ref).max())


def test_dependent_basis_rejected():
    op, F, grid = generate_random_spd_family(5, 2, seed=0)
    v = np.arange(5.0)
    with pytest.raises(SingularSystemError):
        galerkin_solve(np.column_stack([v, 2 * v]), op, F)


def test_as_basis_forms():
    assert as_basis([], 3).shape == (3, 0)
    assert as_basis([np.ones(3), np.zeros(3)], 3).shape == (3, 2)
    assert as_basis(np.ones(3), 3).shape == (3, 1)
    with pytest.raises(DimensionError):
        as_basis(np.ones((4, 1)), 3)


def test_field_rank():
    I = identity_form(6)
    rng = np.random.default_rng(2)
    B = rng.standard_normal((6, 3))
    V = rng.standard_normal((10, 3)) @ B.T
    assert field_rank(V, I) == 3
    assert field_rank(np.zeros((4, 6)), I) == 0
    V[0] += 1e-6 * rng.standard_normal(6)
    assert field_rank(V, I) == 4
    V2 = V.copy()
    V2[0] = V2[1] * (1 + 1e-13)
    V2[1:] = np.outer(rng.standard_normal(9), V2[1])
    assert field_rank(V2, I) == 1


@pytest.mark.parametrize("k1,k2", [(1, 1), (2, 3), (4, 2)])
def test_principal_angles_match_scipy(k1, k2):
    rng = np.random.default_rng(k1 * 10 + k2)
    A = rng.standard_normal((9, k1))
    B = rng.standard_normal((9, k2))
    ours = principal_angles(A, B, identity_form(9))
    ref = np.sort(la.subspace_angles(A, B))
    np.testing.assert_allclose(ours, ref, atol=1e-12)


def test_principal_angles_small_and_weighted():
    rng = np.random.default_rng(0)
    R = SymmetricForm(random_spd(rng, 6))
    A = rng.standard_normal((6, 2))
    # tilt one column by an R-orthogonal direction of R-norm 1e-9 relative
    d = rng.standard_normal(6)
    d -= A @ np.linalg.solve(A.T @ R.dot(A), A.T @ R.dot(d))
    B = A.copy()
    B[:, 0] += 1e-9 * d * np.sqrt(A[:, 0] @ R.dot(A[:, 0])) / np.sqrt(d @ R.dot(d))
    ang = principal_angles(A, B, R)
    assert 1e-11 < ang.max() < 2e-9
