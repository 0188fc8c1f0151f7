"""
Estimation with approximated moment functions.

An :class:`ApproxFamily` perturbs a base model, ``Phi_m = Phi + delta_m``,
with ``delta_m`` of order ``1 / phi_m``. When the kernel has bounded second
derivative, the estimate from ``Phi_m`` differs from the exact one by
``O_P(1 / phi_m)`` plus a term negligible at the root-n scale.
:func:`rate_experiment` measures both effects by simulation.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import re
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import __version__
from .errors import ConfigurationError, EvaluationError, ExperimentAbortedError
from .estimator import EstimateReport, estimate
from .kernels import DivergenceKernel, builtin_kernel
from .models import MomentModel, Sample, check_derivatives, theta_grid
from .simulation import ESTIMATION_ERRORS, MAX_EXCLUDED_FRACTION, DataGenerator, generate, map_ordered
from .solver import SolverOptions

__all__ = [
    "ApproxFamily",
    "UnboundedCurvatureWarning",
    "additive_family",
    "oscillatory_family",
    "approx_model",
    "estimate_approx",
    "perturbation_sup",
    "parse_rate",
    "parse_schedule",
    "rate_experiment",
    "RobustnessReport",
]

logger = logging.getLogger(__name__)


class UnboundedCurvatureWarning(UserWarning):
    """The kernel's second derivative is unbounded, so the robustness rate is not guaranteed."""


@dataclass(frozen=True)
class ApproxFamily:
    """
    A sequence of approximate moment functions around ``base``.

    ``perturbation(m, theta, X)`` returns the ``(n, k)`` correction added to
    ``Phi``. Its theta-derivatives default to zero (theta-free corrections).
    ``rate(m)`` is the advertised convergence rate ``phi_m``.
    """

    base: MomentModel
    perturbation: Callable
    rate: Callable[[float], float]
    perturbation_grad: Callable | None = None
    perturbation_hess: Callable | None = None
    name: str = "custom"
    probe: np.ndarray | None = field(default=None, repr=False)


def parse_rate(spec: str) -> tuple[Callable[[float], float], float]:
    """Parse ``"m"``, ``"sqrt(m)"`` or ``"m^p"`` into ``(rate, p)``."""
    s = spec.replace(" ", "")
    if s == "m":
        p = 1.0
    elif s == "sqrt(m)":
        p = 0.5
    else:
        match = re.fullmatch(r"m(?:\^|\*\*)([0-9]*\.?[0-9]+)", s)
        if not match:
            raise ConfigurationError(f"cannot parse rate {spec!r}; use 'm', 'sqrt(m)' or 'm^p'")
        p = float(match.group(1))
    if p <= 0:
        raise ConfigurationError("rate exponent must be positive")
    return (lambda m: float(m) ** p), p


def parse_schedule(spec: str) -> Callable[[int], int]:
    """Parse ``"n"``, ``"sqrt(n)"`` (rounded up) or ``"n^a"`` into a map n -> m."""
    s = spec.replace(" ", "")
    if s == "n":
        return lambda n: int(n)
    if s in ("sqrt(n)", "ceil(sqrt(n))"):
        return lambda n: int(math.ceil(math.sqrt(n)))
    match = re.fullmatch(r"n(?:\^|\*\*)([0-9]*\.?[0-9]+)", s)
    if not match:
        raise ConfigurationError(f"cannot parse schedule {spec!r}; use 'n', 'sqrt(n)' or 'n^a'")
    a = float(match.group(1))
    return lambda n: max(1, int(math.ceil(n ** a)))


def additive_family(base: MomentModel, scale: float = 1.0, direction=None, rate: str = "m",
                    g: Callable | None = None) -> ApproxFamily:
    """``Phi_m(theta, x) = Phi(theta, x) + scale * g(x) * direction / phi_m`` (``g = 1`` by default)."""
    direction = np.ones(base.k) if direction is None else np.asarray(direction, dtype=float).reshape(base.k)
    rate_fn, _ = parse_rate(rate)

    def pert(m, theta, X):
        gx = np.ones(X.shape[0]) if g is None else np.asarray(g(X), dtype=float)
        return (scale / rate_fn(m)) * gx[:, None] * direction[None, :]

    return ApproxFamily(base, pert, rate_fn, name="additive")


def oscillatory_family(base: MomentModel, scale: float = 1.0, direction=None, rate: str = "m") -> ApproxFamily:
    """``Phi_m = Phi + scale * sin(m * x_0) * direction / phi_m``: fast in x, smooth in theta."""
    direction = np.ones(base.k) if direction is None else np.asarray(direction, dtype=float).reshape(base.k)
    rate_fn, _ = parse_rate(rate)

    def pert(m, theta, X):
        return (scale / rate_fn(m)) * np.sin(m * X[:, 0])[:, None] * direction[None, :]

    return ApproxFamily(base, pert, rate_fn, name="oscillatory")


def approx_model(family: ApproxFamily, m, check: bool = True) -> MomentModel:
    """
    The model with moment function ``Phi_m``.

    ``m = inf`` (or None) returns the base model itself. Unless ``check`` is
    False the derivatives are compared with finite differences on a probe
    sample and a family that fails is rejected with ConfigurationError.
    """
    base = family.base
    if m is None or (isinstance(m, float) and math.isinf(m)):
        return base
    if m < 1:
        raise ConfigurationError(f"approximation index must be >= 1, got {m}")
    pert, pgrad, phess = family.perturbation, family.perturbation_grad, family.perturbation_hess

    def phi(theta, X):
        return base.phi(theta, X) + pert(m, theta, X)

    def grad_phi(theta, X):
        g = base.grad_phi(theta, X)
        return g if pgrad is None else g + pgrad(m, theta, X)

    def hess_phi(theta, X):
        h = base.hess_phi(theta, X)
        return h if phess is None else h + phess(m, theta, X)

    model = MomentModel(f"{base.name}[{family.name}, m={m}]", phi, grad_phi, hess_phi, base.d, base.k, base.q,
                        base.lower, base.upper, dict(base.params), base.fd_fallback)
    if check:
        probe = family.probe
        if probe is None:
            probe = np.random.default_rng(0).standard_normal((16, base.q))
        try:
            check_derivatives(model, probe, theta_grid(base, 3), rtol=1e-4)
        except EvaluationError as exc:
            raise ConfigurationError(f"approximation rejected: {exc}") from None
    return model


def perturbation_sup(family: ApproxFamily, m, X, thetas) -> np.ndarray:
    """Sup over ``thetas`` of ``||Phi_m - Phi||``, ``||grad||`` and ``||Psi||`` differences, per row of X."""
    model = approx_model(family, m, check=False)
    base = family.base
    X = np.asarray(X, dtype=float)
    out = np.zeros((X.shape[0], 3))
    for theta in np.atleast_2d(thetas):
        diffs = (model.phi(theta, X) - base.phi(theta, X),
                 np.asarray(model.grad_phi(theta, X)) - base.grad_phi(theta, X),
                 np.asarray(model.hess_phi(theta, X)) - base.hess_phi(theta, X))
        for j, dlt in enumerate(diffs):
            out[:, j] = np.maximum(out[:, j], np.linalg.norm(np.reshape(dlt, (X.shape[0], -1)), axis=1))
    return out


def _curvature_advisory(kernel: DivergenceKernel):
    if kernel.lambda2_bound is None:
        msg = (f"kernel {kernel.name!r} has unbounded second derivative; the bounded-curvature condition "
               f"Lambda'' <= K assumed for robustness to approximate constraints does not hold")
        logger.warning(msg)
        warnings.warn(msg, UnboundedCurvatureWarning, stacklevel=3)


def estimate_approx(family: ApproxFamily, m, sample: Sample, kernel: DivergenceKernel | str,
                    options: SolverOptions | None = None, workers: int = 1) -> EstimateReport:
    """Estimate with ``Phi`` replaced by ``Phi_m``; warns if the kernel curvature is unbounded."""
    if isinstance(kernel, str):
        kernel = builtin_kernel(kernel)
    _curvature_advisory(kernel)
    return estimate(approx_model(family, m), sample, kernel, options, workers=workers)


@dataclass
class RobustnessReport:
    rows: list
    cells: list
    slope: float
    slope_vs_m: float
    rate_constant: float
    equivalence: dict
    sandwich: list
    excluded: int
    attempted: int
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "version": __version__,
            "config": self.config,
            "slope": self.slope,
            "slope_vs_m": self.slope_vs_m,
            "rate_constant": self.rate_constant,
            "cells": self.cells,
            "equivalence": self.equivalence,
            "sandwich": self.sandwich,
            "excluded": self.excluded,
            "attempted": self.attempted,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# memgel {__version__}\n")
        buf.write(f"# config: {json.dumps(self.config, sort_keys=True)}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["replication", "n", "m", "phi_m", "discrepancy"])
        for r in self.rows:
            writer.writerow([r["replication"], r["n"], r["m"], repr(r["phi_m"]), repr(r["discrepancy"])])
        return buf.getvalue()


def _loglog_slope(x, y) -> float:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    ok = (x > 0) & (y > 0) & np.isfinite(y)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def rate_experiment(family: ApproxFamily, generator: DataGenerator, sample_sizes, m_grid,
                    kernel: DivergenceKernel | str, replications: int, seed: int,
                    schedules: dict | None = None, options: SolverOptions | None = None,
                    workers: int = 1, config: dict | None = None) -> RobustnessReport:
    """
    Monte Carlo study of ``||theta_hat_m - theta_hat||`` over sample sizes and approximation levels.

    Parameters
    ----------
    schedules : dict, optional
        Maps a label to a schedule ``n -> m`` (callable or string accepted by
        :func:`parse_schedule`). For each, the report gives the median of
        ``sqrt(n) ||theta_hat_m(n) - theta_hat||`` per sample size and
        whether it strictly decreases.

    The fitted ``slope`` regresses log median discrepancy on log ``phi_m``
    over ``m_grid`` at the largest sample size.
    """
    if replications < 1:
        raise ConfigurationError("replications must be positive")
    if isinstance(kernel, str):
        kernel = builtin_kernel(kernel)
    _curvature_advisory(kernel)
    opts = options or SolverOptions()
    sample_sizes = sorted(int(n) for n in sample_sizes)
    m_grid = sorted(int(m) for m in m_grid)
    scheds = {name: parse_schedule(s) if isinstance(s, str) else s for name, s in (schedules or {}).items()}
    models = {}

    def model_for(m):
        if m not in models:
            models[m] = approx_model(family, m)
        return models[m]

    ms_by_n = {n: sorted(set(m_grid) | {int(f(n)) for f in scheds.values()}) for n in sample_sizes}
    for n in sample_sizes:
        for m in ms_by_n[n]:
            model_for(m)

    def unit(cell):
        n, r = cell
        sample = generate(generator, n, seed, r)
        try:
            exact = estimate(family.base, sample, kernel, opts).theta_hat
            out = []
            for m in ms_by_n[n]:
                approx = estimate(models[m], sample, kernel, opts).theta_hat
                out.append({"replication": r, "n": n, "m": m, "phi_m": float(family.rate(m)),
                            "discrepancy": float(np.linalg.norm(approx - exact))})
            return out
        except ESTIMATION_ERRORS as exc:
            logger.info("replication %d (n=%d) excluded: %s", r, n, exc)
            return None

    cells_in = [(n, r) for n in sample_sizes for r in range(replications)]
    results = map_ordered(unit, cells_in, workers)
    excluded = sum(res is None for res in results)
    if excluded > MAX_EXCLUDED_FRACTION * len(cells_in):
        raise ExperimentAbortedError(f"{excluded} of {len(cells_in)} replications failed "
                                     f"(limit {MAX_EXCLUDED_FRACTION:.0%})")
    rows = [row for res in results if res is not None for row in res]

    def medians(n, m):
        vals = np.array([r["discrepancy"] for r in rows if r["n"] == n and r["m"] == m])
        return vals

    cells = []
    for n in sample_sizes:
        for m in ms_by_n[n]:
            vals = medians(n, m)
            cells.append({"n": n, "m": m, "phi_m": float(family.rate(m)), "count": int(vals.size),
                          "median_discrepancy": float(np.median(vals)),
                          "median_scaled_sq": float(np.median(n * vals ** 2)),
                          "median_root_n": float(np.median(np.sqrt(n) * vals))})
    n_max = sample_sizes[-1]
    top = [c for c in cells if c["n"] == n_max and c["m"] in m_grid]
    slope = _loglog_slope([c["phi_m"] for c in top], [c["median_discrepancy"] for c in top])
    slope_m = _loglog_slope([c["m"] for c in top], [c["median_discrepancy"] for c in top])
    rate_constant = float(np.max([c["median_discrepancy"] * c["phi_m"] for c in top])) if top else float("nan")

    equivalence = {}
    for name, f in scheds.items():
        path = []
        for n in sample_sizes:
            m = int(f(n))
            cell = next(c for c in cells if c["n"] == n and c["m"] == m)
            path.append({"n": n, "m": m, "n_over_phi_sq": n / family.rate(m) ** 2,
                         "median_root_n": cell["median_root_n"]})
        meds = [p["median_root_n"] for p in path]
        equivalence[name] = {
            "path": path,
            "strictly_decreasing": bool(all(b < a for a, b in zip(meds, meds[1:]))),
            "ratio_last_first": float(meds[-1] / meds[0]) if meds[0] > 0 else float("nan"),
        }

    sandwich = []
    for n in sample_sizes:
        cs = [c for c in cells if c["n"] == n and c["m"] in m_grid]
        if len(cs) >= 2:
            x = np.array([n / c["phi_m"] ** 2 for c in cs])
            y = np.array([c["median_scaled_sq"] for c in cs])
            b, a = np.polyfit(x, y, 1)
            sandwich.append({"n": n, "intercept": float(a), "slope": float(b)})

    return RobustnessReport(rows, cells, slope, slope_m, rate_constant, equivalence, sandwich,
                            excluded, len(cells_in), dict(config or {}))
