"""Moment-condition estimation by maximum entropy on the mean (generalized empirical likelihood)."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConditioningError,
    ConfigurationError,
    ConsistencyError,
    EvaluationError,
    ExperimentAbortedError,
    GloballyInfeasibleError,
    InfeasibleError,
    MemGelError,
)
from .kernels import DivergenceKernel, builtin_kernel, conjugate, divergence_value  # noqa: E402
from .models import MomentModel, Sample, builtin_model, sample_moments, validate_assumptions  # noqa: E402
from .solver import (  # noqa: E402
    SolverOptions,
    inner_maximize,
    newton_blocks,
    outer_minimize,
    profile_objective,
    schur_update,
)
from .estimator import EstimateReport, WeightedSample, estimate, feasibility_check, mem_weights  # noqa: E402

__all__ = [
    "__version__",
    "ConditioningError",
    "ConfigurationError",
    "ConsistencyError",
    "EvaluationError",
    "ExperimentAbortedError",
    "GloballyInfeasibleError",
    "InfeasibleError",
    "MemGelError",
    "DivergenceKernel",
    "builtin_kernel",
    "conjugate",
    "divergence_value",
    "MomentModel",
    "Sample",
    "builtin_model",
    "sample_moments",
    "validate_assumptions",
    "SolverOptions",
    "inner_maximize",
    "newton_blocks",
    "outer_minimize",
    "profile_objective",
    "schur_update",
    "EstimateReport",
    "WeightedSample",
    "estimate",
    "feasibility_check",
    "mem_weights",
]
