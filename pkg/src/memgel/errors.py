"""Exception hierarchy shared by the estimation modules."""

from __future__ import annotations

import numpy as np


class MemGelError(Exception):
    """Base class for all errors raised by memgel."""


class ConfigurationError(MemGelError, ValueError):
    """Invalid user input: unknown names, inconsistent dimensions, bad options."""


class EvaluationError(MemGelError, ArithmeticError):
    """A moment function or kernel produced an unusable value."""


class InfeasibleError(MemGelError):
    """The inner supremum is unbounded at a given parameter value.

    ``direction`` holds the last (normalized) ascent direction in
    (gamma, lambda) coordinates.
    """

    def __init__(self, message: str, theta=None, direction=None):
        super().__init__(message)
        self.theta = None if theta is None else np.asarray(theta, dtype=float)
        self.direction = None if direction is None else np.asarray(direction, dtype=float)


class GloballyInfeasibleError(InfeasibleError):
    """No point of the multistart grid admits a bounded inner problem."""


class ConditioningError(MemGelError, np.linalg.LinAlgError):
    """A linear system needed by the solver is numerically singular."""

    def __init__(self, message: str, eigenvalue: float | None = None):
        super().__init__(message)
        self.eigenvalue = eigenvalue


class ConsistencyError(MemGelError):
    """A returned solution violates the constraints it is meant to satisfy."""


class ExperimentAbortedError(MemGelError):
    """Too many Monte Carlo replications failed to produce an estimate."""
