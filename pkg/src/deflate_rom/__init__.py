"""Intrinsic deflation for parametric symmetric elliptic problems.

The package computes separated approximations ``u(g) ~ sum_i B_i c_i(g)`` of
the solutions of ``A(g) u(g) = f(g)`` by successive optimal low-rank
corrections measured in the parameter-averaged energy norm, and a POD
baseline for comparison.
"""

from .errors import (
    CoercivityError,
    ConfigError,
    ConvergenceError,
    DeflateRomError,
    DimensionError,
    InvariantError,
    NodeSolveError,
    NotPositiveDefiniteError,
    SingularSystemError,
    ZeroDataError,
)
from .hilbert import SymmetricForm, apply_form, identity_form, orthonormalize, solve_spd
from .parametric import (
    ParameterGrid,
    ParametricOperator,
    check_coercivity,
    generate_diffusion_1d,
    generate_random_spd_family,
    load_problem,
    mean_operator,
    parse_quadrature,
    save_problem,
    truth_solve,
)
from .galerkin import (
    energy,
    field_rank,
    galerkin_solve,
    mean_error,
    mean_form,
    output_functional,
    principal_angles,
)
from .subspace_opt import (
    OptimizerOptions,
    Rank1Candidate,
    RankKCandidate,
    rank1_gradient,
    rank1_maximize,
    rank1_objective,
    rank1_stationarity_residual,
    rankk_minimize,
)
from .deflation import (
    DeflationExpansion,
    DeflationTerm,
    IdentityReport,
    decay_diagnostic,
    deflate_step,
    load_expansion,
    run_deflation,
    save_expansion,
    verify_identities,
)
from .pod import PodBasis, load_pod, pod_error_curve, pod_modes, save_pod
from .kernels import backend, use_backend

__version__ = "0.1.0"
