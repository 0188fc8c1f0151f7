"""
User-facing MEM / GEL estimation.

:func:`estimate` binds a moment model, a sample and a kernel (the log-Laplace
transform of the prior on observation weights), solves the saddle-point
problem, rebuilds the weighted empirical measure and attaches plug-in
asymptotic standard errors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.spatial import ConvexHull, QhullError

from . import __version__
from .errors import ConditioningError, ConfigurationError, ConsistencyError, InfeasibleError
from .kernels import DivergenceKernel, builtin_kernel
from .models import AssumptionReport, MomentModel, Sample, sample_moments, validate_assumptions
from .solver import SaddleSolution, SolverOptions, _design, _solve_inner, outer_minimize

__all__ = [
    "WeightedSample",
    "EstimateReport",
    "estimate",
    "mem_weights",
    "feasibility_check",
    "standard_errors",
]


@dataclass(frozen=True)
class WeightedSample:
    """The reweighted empirical measure ``(1/n) sum_i w_i delta_{X_i}``."""

    sample: Sample
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).ravel()
        if w.shape != (self.sample.n,):
            raise ConfigurationError(f"expected {self.sample.n} weights, got {w.shape[0]}")
        if abs(w.mean() - 1.0) > 1e-8:
            raise ConsistencyError(f"weights average to {w.mean():.12g}, expected 1")
        object.__setattr__(self, "weights", w)

    def expect(self, values) -> np.ndarray:
        """Integral of per-observation ``values`` (leading axis n) under the measure."""
        values = np.asarray(values, dtype=float)
        return np.tensordot(self.weights, values, axes=(0, 0)) / self.sample.n


@dataclass
class EstimateReport:
    theta_hat: np.ndarray
    std_errors: np.ndarray
    gamma: float
    lam: np.ndarray
    weights: np.ndarray
    divergence: float
    kernel_name: str
    model_name: str
    n: int
    rho: float
    solution: SaddleSolution = field(repr=False)
    diagnostics: AssumptionReport = field(repr=False)
    options: SolverOptions = field(default_factory=SolverOptions, repr=False)
    warnings: list = field(default_factory=list)

    @property
    def weights_summary(self) -> dict:
        w = self.weights
        return {"min": float(w.min()), "max": float(w.max()), "negative": int(np.sum(w < 0))}

    def to_dict(self) -> dict:
        return {
            "version": __version__,
            "model": self.model_name,
            "kernel": self.kernel_name,
            "n": self.n,
            "theta_hat": self.theta_hat.tolist(),
            "std_errors": self.std_errors.tolist(),
            "std_error_kind": "plug-in asymptotic",
            "gamma": self.gamma,
            "lambda": self.lam.tolist(),
            "weights": self.weights.tolist(),
            "weights_summary": self.weights_summary,
            "divergence": self.divergence,
            "diagnostics": {
                "rho": self.rho,
                "assumptions": self.diagnostics.to_dict(),
                "solver_trace": self.solution.trace,
                "inner_iterations": self.solution.inner.iterations,
                "inner_grad_norm": self.solution.inner.grad_norm,
                "warnings": list(self.warnings),
            },
            "options": self.options.to_dict(),
        }

    def to_json(self, **extra) -> str:
        doc = self.to_dict()
        doc.update(extra)
        return json.dumps(doc, indent=2, sort_keys=False)

    def table(self) -> str:
        lines = [
            f"model: {self.model_name}   kernel: {self.kernel_name}   n = {self.n}",
            f"{'param':>8} {'estimate':>14} {'std.err':>12} {'95% lower':>12} {'95% upper':>12}",
        ]
        for j, (t, se) in enumerate(zip(self.theta_hat, self.std_errors)):
            lines.append(f"{'theta' + str(j):>8} {t:>14.8g} {se:>12.6g} {t - 1.959964 * se:>12.6g} {t + 1.959964 * se:>12.6g}")
        ws = self.weights_summary
        lines.append(f"divergence = {self.divergence:.6g}   weights in [{ws['min']:.4g}, {ws['max']:.4g}]"
                     f"   negative weights = {ws['negative']}   rho = {self.rho:.4g}")
        lines.append("standard errors: plug-in asymptotic")
        if not self.diagnostics.passed:
            lines.append("warning: rank or interior diagnostics failed at theta_hat")
        lines.extend(f"warning: {w}" for w in self.warnings)
        return "\n".join(lines)


def standard_errors(model: MomentModel, sample: Sample, theta) -> np.ndarray:
    """``sqrt(diag((D V^-1 D^T)^-1) / n)`` with empirical D, V at ``theta``."""
    _, D, V = sample_moments(model, sample, theta)
    try:
        cv = linalg.cho_factor(V)
        S = D @ linalg.cho_solve(cv, D.T)
        cs = linalg.cho_factor(0.5 * (S + S.T))
    except linalg.LinAlgError:
        raise ConditioningError("efficient variance D V^-1 D^T is singular at theta_hat",
                                eigenvalue=float(np.linalg.eigvalsh(V)[0])) from None
    avar = linalg.cho_solve(cs, np.eye(model.d))
    return np.sqrt(np.diag(avar) / sample.n)


def mem_weights(solution: SaddleSolution, kernel: DivergenceKernel, tol: float = 1e-6) -> WeightedSample:
    """
    Posterior-mean weights ``w_i = Lambda'(gamma + lambda^T Phi(theta_hat, X_i))``.

    Raises ConsistencyError when the weighted measure misses the moment
    constraints by more than ``tol`` or does not have unit mass.
    """
    if not solution.inner.converged:
        raise ConsistencyError("cannot build weights from an unconverged solution")
    model, sample = solution.model, solution.sample
    phi = model.evaluate(solution.theta_hat, sample.data)
    w = kernel.lam1(_design(phi) @ solution.inner.x)
    mass = abs(w.mean() - 1.0)
    resid = float(np.linalg.norm((phi * w[:, None]).mean(axis=0)))
    if mass > 1e-8 or resid > tol:
        raise ConsistencyError(f"weighted measure off the model: |mass - 1| = {mass:.3g}, "
                               f"moment residual = {resid:.3g}")
    return WeightedSample(sample, w)


def _sort_rows(data: np.ndarray) -> np.ndarray:
    return np.lexsort(data.T[::-1])


def estimate(model: MomentModel, sample: Sample, kernel: DivergenceKernel | str,
             options: SolverOptions | None = None, workers: int = 1) -> EstimateReport:
    """
    MEM estimator of theta for a prior whose log-Laplace transform is ``kernel``.

    Rows are processed in a canonical (sorted) order so the result does not
    depend on how the sample is permuted; weights are returned in the
    caller's row order.
    """
    opts = options or SolverOptions()
    if isinstance(kernel, str):
        kernel = builtin_kernel(kernel)
    if sample.q != model.q:
        raise ConfigurationError(f"model {model.name!r} expects {model.q} observation columns, sample has {sample.q}")
    if sample.n < model.k + 1:
        raise ConfigurationError(f"need at least k + 1 = {model.k + 1} observations, got {sample.n}")
    order = _sort_rows(sample.data)
    canon = sample.take(order)
    sol = outer_minimize(model, canon, kernel, opts, workers=workers)
    ws = mem_weights(sol, kernel)
    weights = np.empty_like(ws.weights)
    weights[order] = ws.weights
    diag = validate_assumptions(model, canon, sol.theta_hat)
    se = standard_errors(model, canon, sol.theta_hat)
    warnings = []
    if sol.negative_weights:
        warnings.append(f"{sol.negative_weights} negative weights in the fitted measure")
    return EstimateReport(
        theta_hat=sol.theta_hat,
        std_errors=se,
        gamma=sol.inner.gamma,
        lam=sol.inner.lam,
        weights=weights,
        divergence=sol.divergence,
        kernel_name=kernel.name,
        model_name=model.name,
        n=sample.n,
        rho=sol.rho,
        solution=sol,
        diagnostics=diag,
        options=opts,
        warnings=warnings,
    )


def _hull_verdict(points: np.ndarray, margin: float) -> str:
    k = points.shape[1]
    if k == 1:
        lo, hi = points.min(), points.max()
        gap = min(-lo, hi)
    else:
        try:
            hull = ConvexHull(points)
        except (QhullError, ValueError):
            return "infeasible"
        # facet equations: normal . x + offset <= 0 inside, normals are unit length
        gap = float(-hull.equations[:, -1].max())
    if gap > margin:
        return "feasible"
    if gap < -margin:
        return "infeasible"
    return "indeterminate"


def feasibility_check(model: MomentModel, sample: Sample, theta, kernel: DivergenceKernel | str | None = None,
                      margin: float = 1e-10) -> str:
    """
    Whether some weight vector in the prior-support interior satisfies the constraints.

    For kernels with positive weights the question is whether 0 lies in the
    interior of the convex hull of ``{Phi(theta, X_i)}``: answered
    geometrically when k <= 2 and by the unbounded-ascent test otherwise. For
    full-line kernels only consistency of the affine constraints is required.

    Returns "feasible", "infeasible" or "indeterminate".
    """
    kernel = builtin_kernel("exponential-EL") if kernel is None else kernel
    if isinstance(kernel, str):
        kernel = builtin_kernel(kernel)
    theta = np.asarray(theta, dtype=float).reshape(model.d)
    phi = model.evaluate(theta, sample.data)
    return phi_feasibility(phi, kernel, margin)


def phi_feasibility(phi: np.ndarray, kernel: DivergenceKernel, margin: float = 1e-10) -> str:
    """:func:`feasibility_check` on precomputed moment values, shape ``(n, k)``."""
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    if not kernel.positive_weights:
        U = _design(phi)
        target = np.zeros(U.shape[1])
        target[0] = 1.0
        # need w with U^T w / n = e0: solvable iff e0 lies in the row space of U
        sol, *_ = np.linalg.lstsq(U.T, target * U.shape[0], rcond=None)
        resid = np.linalg.norm(U.T @ sol / U.shape[0] - target)
        return "feasible" if resid <= margin else "infeasible"
    if phi.shape[1] <= 2:
        return _hull_verdict(phi, margin)
    try:
        _solve_inner(_design(phi), kernel, SolverOptions())
    except InfeasibleError:
        return "infeasible"
    except ConditioningError:
        return "indeterminate"
    return "feasible"
