"""Preconditioned high-index saddle dynamics (p-HiSD).

Searches for index-k saddle points of smooth energies under a user-chosen
SPD metric.  The main entry points are :func:`solve` and the preconditioner
constructors in :mod:`phisd.preconditioners`.
"""
__version__ = "0.1.0"

from .dynamics import (
    MetricStage,
    RunTrace,
    SolverConfig,
    StageSwitch,
    Status,
    estimate_linear_rate,
    optimal_step_size,
    solve,
    verify_saddle,
)
from .errors import (
    ConfigError,
    ContractViolation,
    DefinitenessError,
    DegenerateSpectrumWarning,
    FrameCollapseError,
    ParameterError,
    PhisdError,
    RankDeficiencyError,
)
from .metric import (
    DenseMetric,
    DiagonalMetric,
    Frame,
    IdentityMetric,
    SpdMetric,
    as_metric,
    generalized_eigendecomposition,
    m_inner,
    m_norm,
    m_orthonormalize,
    morse_index,
)
from .preconditioners import (
    IcParams,
    InertialMetricBuilder,
    block_jacobi_metric,
    frozen_spectral_metric,
    jacobi_metric,
    select_metric,
    shifted_ic_metric,
    shifted_operator_metric,
    spectral_metric,
    subspace_inertial_metric,
)
from .problems import (
    GridSpec,
    ProblemDefinition,
    allen_cahn_problem,
    bistable_chain_problem,
    butterfly_problem,
    finite_difference_check,
    quadratic_problem,
)
