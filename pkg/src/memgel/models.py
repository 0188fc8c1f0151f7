"""
Moment condition models ``E[Phi(theta0, X)] = 0``.

Moment functions are evaluated on a whole sample at once: for ``X`` of shape
``(n, q)`` and ``theta`` of shape ``(d,)``

* ``phi(theta, X)`` has shape ``(n, k)``,
* ``grad_phi(theta, X)`` has shape ``(n, d, k)`` (derivative in theta),
* ``hess_phi(theta, X)`` has shape ``(n, d, d, k)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigurationError, EvaluationError

__all__ = [
    "MomentModel",
    "Sample",
    "AssumptionReport",
    "builtin_model",
    "sample_moments",
    "validate_assumptions",
    "check_derivatives",
    "BUILTIN_MODELS",
]

_FD_STEP = np.finfo(float).eps ** (1.0 / 3.0)


@dataclass(frozen=True)
class Sample:
    """An i.i.d. sample stored row-wise, shape ``(n, q)``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim == 1:
            data = data[:, None]
        if data.ndim != 2 or data.shape[0] == 0:
            raise ConfigurationError(f"sample must be a non-empty (n, q) array, got shape {data.shape}")
        bad = ~np.isfinite(data)
        if bad.any():
            row, col = np.argwhere(bad)[0]
            raise ConfigurationError(f"non-finite observation at row {row}, column {col}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def q(self) -> int:
        return self.data.shape[1]

    def take(self, index) -> "Sample":
        return Sample(self.data[np.asarray(index)])


@dataclass(frozen=True)
class MomentModel:
    """
    A moment function with its first and second parameter derivatives.

    Use :meth:`custom` to build a model from ``phi`` alone; missing
    derivatives are then replaced by central finite differences and
    ``fd_fallback`` is set.
    """

    name: str
    phi: Callable[[np.ndarray, np.ndarray], np.ndarray]
    grad_phi: Callable[[np.ndarray, np.ndarray], np.ndarray]
    hess_phi: Callable[[np.ndarray, np.ndarray], np.ndarray]
    d: int
    k: int
    q: int
    lower: np.ndarray
    upper: np.ndarray
    params: dict = field(default_factory=dict)
    fd_fallback: bool = False

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float).reshape(-1)
        upper = np.asarray(self.upper, dtype=float).reshape(-1)
        if self.k < self.d:
            raise ConfigurationError(f"model {self.name!r}: k={self.k} moments < d={self.d} parameters")
        if lower.shape != (self.d,) or upper.shape != (self.d,):
            raise ConfigurationError(f"model {self.name!r}: parameter box must have {self.d} coordinates")
        if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper)) and np.all(lower < upper)):
            raise ConfigurationError(f"model {self.name!r}: parameter box must be bounded with nonempty interior")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def custom(cls, name, phi, d, k, q, bounds, grad_phi=None, hess_phi=None, params=None):
        """Build a model, falling back to finite differences for absent derivatives."""
        lower, upper = np.asarray(bounds, dtype=float).reshape(-1, 2).T
        fd = grad_phi is None or hess_phi is None
        if grad_phi is None:
            grad_phi = _fd_jacobian(phi)
        if hess_phi is None:
            hess_phi = _fd_jacobian(grad_phi)
        return cls(name, phi, grad_phi, hess_phi, d, k, q, lower, upper, dict(params or {}), fd)

    @property
    def bounds(self) -> np.ndarray:
        return np.column_stack([self.lower, self.upper])

    def with_bounds(self, bounds) -> "MomentModel":
        lower, upper = np.asarray(bounds, dtype=float).reshape(-1, 2).T
        return MomentModel(self.name, self.phi, self.grad_phi, self.hess_phi, self.d, self.k,
                           self.q, lower, upper, self.params, self.fd_fallback)

    def contains(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= self.lower) and np.all(theta <= self.upper))

    def evaluate(self, theta, X) -> np.ndarray:
        """``phi`` with shape and finiteness checks."""
        out = np.asarray(self.phi(np.asarray(theta, dtype=float), X), dtype=float)
        if out.shape != (X.shape[0], self.k):
            raise EvaluationError(f"model {self.name!r}: phi returned shape {out.shape}, "
                                  f"expected {(X.shape[0], self.k)}")
        bad = ~np.isfinite(out)
        if bad.any():
            row = int(np.argwhere(bad)[0, 0])
            raise EvaluationError(f"model {self.name!r}: non-finite moment value at row {row}")
        return out


def _fd_jacobian(f):
    """Central-difference derivative in theta of a batched function, prepended as axis 1."""

    def jac(theta, X):
        theta = np.asarray(theta, dtype=float)
        cols = []
        for j in range(theta.size):
            h = _FD_STEP * (1.0 + abs(theta[j]))
            e = np.zeros_like(theta)
            e[j] = h
            cols.append((np.asarray(f(theta + e, X)) - np.asarray(f(theta - e, X))) / (2 * h))
        return np.stack(cols, axis=1)

    return jac


# --- built-in models -----------------------------------------------------------

def _mean_model(bounds=None):
    def phi(theta, X):
        return X[:, :1] - theta[0]

    def grad(theta, X):
        return np.full((X.shape[0], 1, 1), -1.0)

    def hess(theta, X):
        return np.zeros((X.shape[0], 1, 1, 1))

    bounds = [[-10.0, 10.0]] if bounds is None else bounds
    lower, upper = np.asarray(bounds, dtype=float).reshape(-1, 2).T
    return MomentModel("mean", phi, grad, hess, 1, 1, 1, lower, upper, {})


def _mean_variance_model(sigma2=1.0, bounds=None):
    if not sigma2 > 0:
        raise ConfigurationError(f"mean-variance: sigma2 must be positive, got {sigma2}")

    def phi(theta, X):
        x = X[:, 0]
        t = theta[0]
        return np.column_stack([x - t, x * x - t * t - sigma2])

    def grad(theta, X):
        out = np.empty((X.shape[0], 1, 2))
        out[:, 0, 0] = -1.0
        out[:, 0, 1] = -2.0 * theta[0]
        return out

    def hess(theta, X):
        out = np.zeros((X.shape[0], 1, 1, 2))
        out[:, 0, 0, 1] = -2.0
        return out

    bounds = [[-10.0, 10.0]] if bounds is None else bounds
    lower, upper = np.asarray(bounds, dtype=float).reshape(-1, 2).T
    return MomentModel("mean-variance", phi, grad, hess, 1, 2, 1, lower, upper, {"sigma2": float(sigma2)})


def _linear_iv_model(d=1, k=2, bounds=None):
    d, k = int(d), int(k)
    if d < 1 or k < d:
        raise ConfigurationError(f"linear-iv: need 1 <= d <= k, got d={d}, k={k}")

    def phi(theta, X):
        y, w, z = X[:, 0], X[:, 1:1 + d], X[:, 1 + d:1 + d + k]
        return z * (y - w @ theta)[:, None]

    def grad(theta, X):
        w, z = X[:, 1:1 + d], X[:, 1 + d:1 + d + k]
        return -w[:, :, None] * z[:, None, :]

    def hess(theta, X):
        return np.zeros((X.shape[0], d, d, k))

    bounds = [[-10.0, 10.0]] * d if bounds is None else bounds
    lower, upper = np.asarray(bounds, dtype=float).reshape(-1, 2).T
    return MomentModel("linear-iv", phi, grad, hess, d, k, 1 + d + k, lower, upper, {"d": d, "k": k})


BUILTIN_MODELS = {
    "mean": _mean_model,
    "mean-variance": _mean_variance_model,
    "linear-iv": _linear_iv_model,
}


def builtin_model(name: str, **params) -> MomentModel:
    """
    Construct a built-in model.

    ``mean``: ``Phi = x - theta``. ``mean-variance``: ``Phi = (x - theta,
    x**2 - theta**2 - sigma2)`` with known ``sigma2``. ``linear-iv``:
    observations ``(y, w[d], z[k])`` and ``Phi = z * (y - w @ theta)``.
    All accept ``bounds``, a ``(d, 2)`` array of box limits.
    """
    try:
        factory = BUILTIN_MODELS[name]
    except KeyError:
        raise ConfigurationError(f"unknown model {name!r}; expected one of {sorted(BUILTIN_MODELS)}") from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise ConfigurationError(f"model {name!r}: {exc}") from None


def _check_dims(model: MomentModel, sample: Sample):
    if sample.q != model.q:
        raise ConfigurationError(
            f"model {model.name!r} expects {model.q} observation columns, sample has {sample.q}"
        )


def sample_moments(model: MomentModel, sample: Sample, theta):
    """
    Empirical moments at ``theta``.

    Returns
    -------
    mean_phi : (k,) ndarray
        ``P_n[Phi]``
    mean_grad : (d, k) ndarray
        ``P_n[grad Phi]``
    outer : (k, k) ndarray
        ``P_n[Phi Phi^T]`` (uncentered)
    """
    _check_dims(model, sample)
    theta = np.asarray(theta, dtype=float).reshape(model.d)
    X = sample.data
    phi = model.evaluate(theta, X)
    grad = np.asarray(model.grad_phi(theta, X), dtype=float)
    n = X.shape[0]
    return phi.mean(axis=0), grad.mean(axis=0), phi.T @ phi / n


@dataclass
class AssumptionReport:
    """Rank and regularity diagnostics of a model on a sample at one theta."""

    theta: np.ndarray
    d_singular_values: np.ndarray
    v_eigenvalues: np.ndarray
    d_full_rank: bool
    v_full_rank: bool
    order_condition: bool
    interior: bool
    fd_fallback: bool
    moment_proxy: dict
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.d_full_rank and self.v_full_rank and self.order_condition and self.interior

    def to_dict(self) -> dict:
        return {
            "theta": self.theta.tolist(),
            "d_singular_values": self.d_singular_values.tolist(),
            "v_eigenvalues": self.v_eigenvalues.tolist(),
            "d_full_rank": self.d_full_rank,
            "v_full_rank": self.v_full_rank,
            "order_condition": self.order_condition,
            "interior": self.interior,
            "fd_fallback": self.fd_fallback,
            "moment_proxy": self.moment_proxy,
            "passed": self.passed,
            "notes": list(self.notes),
        }


def _rank_ok(values, rtol=1e-10):
    values = np.abs(np.asarray(values))
    top = values.max(initial=0.0)
    return bool(top > 0 and values.min() > rtol * top)


def validate_assumptions(model: MomentModel, sample: Sample, theta, grid_points: int = 5) -> AssumptionReport:
    """
    Check the full-rank conditions on the empirical ``D`` and ``V`` at ``theta``.

    Also reports the order condition ``k >= d``, whether ``theta`` is interior
    to the parameter box, and fourth sample moments of the sup-norms of
    ``Phi``, ``grad Phi`` and ``Psi`` over a coarse theta grid. The latter is
    only a proxy for integrable domination, which cannot be checked from data.
    """
    theta = np.asarray(theta, dtype=float).reshape(model.d)
    _, mean_grad, outer = sample_moments(model, sample, theta)
    sv = np.linalg.svd(mean_grad, compute_uv=False)
    ev = np.linalg.eigvalsh(outer)
    interior = bool(np.all(theta > model.lower) and np.all(theta < model.upper))
    notes = ["dominating-function conditions checked only through a finite-sample moment proxy"]
    if model.fd_fallback:
        notes.append("derivatives computed by finite differences")
    return AssumptionReport(
        theta=theta,
        d_singular_values=sv,
        v_eigenvalues=ev,
        d_full_rank=_rank_ok(sv) and sv.size == model.d,
        v_full_rank=_rank_ok(ev),
        order_condition=model.k >= model.d,
        interior=interior,
        fd_fallback=model.fd_fallback,
        moment_proxy=_moment_proxy(model, sample, grid_points),
        notes=notes,
    )


def theta_grid(model: MomentModel, points: int) -> np.ndarray:
    """Cell-centre grid over the parameter box, shape ``(points**d, d)``."""
    axes = [lo + (np.arange(points) + 0.5) * (hi - lo) / points for lo, hi in zip(model.lower, model.upper)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def _moment_proxy(model, sample, points):
    X = sample.data
    sup_phi = np.zeros(sample.n)
    sup_grad = np.zeros(sample.n)
    sup_hess = np.zeros(sample.n)
    for theta in theta_grid(model, points):
        sup_phi = np.maximum(sup_phi, np.linalg.norm(model.phi(theta, X), axis=1))
        sup_grad = np.maximum(sup_grad, np.linalg.norm(np.asarray(model.grad_phi(theta, X)).reshape(sample.n, -1), axis=1))
        sup_hess = np.maximum(sup_hess, np.linalg.norm(np.asarray(model.hess_phi(theta, X)).reshape(sample.n, -1), axis=1))
    return {
        "phi_fourth_moment": float(np.mean(sup_phi ** 4)),
        "grad_fourth_moment": float(np.mean(sup_grad ** 4)),
        "hess_fourth_moment": float(np.mean(sup_hess ** 4)),
    }


def check_derivatives(model: MomentModel, X, thetas, rtol: float = 1e-5) -> float:
    """
    Largest relative discrepancy between analytic and central-difference derivatives.

    Compares ``grad_phi`` against differences of ``phi`` and ``hess_phi``
    against differences of ``grad_phi`` at each row of ``thetas``. The
    relative error uses ``max(1, |analytic|)`` as scale. Raises
    EvaluationError when it exceeds ``rtol``.
    """
    X = np.asarray(X, dtype=float)
    worst = 0.0
    g_fd = _fd_jacobian(model.phi)
    h_fd = _fd_jacobian(model.grad_phi)
    for theta in np.atleast_2d(thetas):
        for exact, approx in ((model.grad_phi(theta, X), g_fd(theta, X)),
                              (model.hess_phi(theta, X), h_fd(theta, X))):
            exact = np.asarray(exact, dtype=float)
            err = np.abs(exact - approx) / np.maximum(1.0, np.abs(exact))
            worst = max(worst, float(err.max(initial=0.0)))
    if worst > rtol:
        raise EvaluationError(f"model {model.name!r}: derivative mismatch {worst:.3g} exceeds {rtol:g}")
    return worst
