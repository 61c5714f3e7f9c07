import numpy as np
import pytest

from deflate_rom import kernels
from deflate_rom.hilbert import SymmetricForm, identity_form
from deflate_rom.parametric import ParameterGrid, ParametricOperator


def diag_family(gammas=(1.0, 2.0), weights=None, rhs=(1.0, 1.0)):
    """``A_q = diag(1, g_q)`` with identity reference; the worked small example."""
    gammas = np.asarray(gammas, dtype=float)
    if weights is None:
        weights = np.full(gammas.size, 1.0 / gammas.size)
    forms = tuple(SymmetricForm(np.diag([1.0, g])) for g in gammas)
    op = ParametricOperator(forms, identity_form(2), alpha=1.0)
    grid = ParameterGrid(gammas, weights)
    F = np.tile(np.asarray(rhs, dtype=float), (gammas.size, 1))
    return op, F, grid


def random_spd(rng, n, cond=10.0):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (Q * np.geomspace(1.0, cond, n)) @ Q.T


@pytest.fixture
def diag_example():
    return diag_family()


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    """Run the test once per kernel backend."""
    previous = kernels.backend()
    kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(previous)


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
