"""
Monte Carlo harness with known data-generating processes.

Every (n, replication) cell draws from its own Philox stream keyed by
``(seed, n, replication)``, so results do not depend on the number of worker
threads or on the order in which cells are scheduled.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .errors import ConditioningError, ConfigurationError, ConsistencyError, ExperimentAbortedError, InfeasibleError
from .estimator import estimate
from .kernels import builtin_kernel
from .models import MomentModel, Sample
from .solver import SolverOptions

__all__ = [
    "DataGenerator",
    "builtin_generator",
    "generate",
    "population_matrices",
    "efficient_variance",
    "cell_rng",
    "monte_carlo",
    "EfficiencyReport",
    "MAX_EXCLUDED_FRACTION",
]

logger = logging.getLogger(__name__)

MAX_EXCLUDED_FRACTION = 0.2
RNG_FAMILY = "numpy.random.Philox"
ESTIMATION_ERRORS = (InfeasibleError, ConditioningError, ConsistencyError)


def cell_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator for one work unit."""
    ss = np.random.SeedSequence([int(seed), *(int(k) for k in keys)])
    return np.random.Generator(np.random.Philox(ss))


def map_ordered(fn, items, workers: int = 1):
    """``map`` over a thread pool, results in input order."""
    items = list(items)
    if workers is None or workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class DataGenerator:
    """
    A data-generating process with a known true parameter.

    ``normal``: ``X ~ N(theta0, sigma2)``. ``linear-iv``: ``z ~ N(0, sigma_z)``,
    ``w = pi^T z + e``, ``y = w^T theta0 + u``, where ``e ~ N(0, sigma_e2 I)``
    and ``u`` has variance ``sigma_u2`` and correlation ``rho`` with the
    normalized sum of the components of ``e``.
    """

    name: str
    params: dict
    theta0: np.ndarray

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        p = self.params
        if self.name == "normal":
            return (self.theta0[0] + np.sqrt(p["sigma2"]) * rng.standard_normal(n))[:, None]
        pi = np.asarray(p["pi"], dtype=float)
        k, d = pi.shape
        chol = np.linalg.cholesky(np.asarray(p["sigma_z"], dtype=float))
        z = rng.standard_normal((n, k)) @ chol.T
        eps = rng.standard_normal((n, d))
        eta = rng.standard_normal(n)
        rho = p["rho"]
        e = np.sqrt(p["sigma_e2"]) * eps
        u = np.sqrt(p["sigma_u2"]) * (rho * eps.sum(axis=1) / np.sqrt(d) + np.sqrt(1 - rho * rho) * eta)
        w = z @ pi + e
        y = w @ self.theta0 + u
        return np.column_stack([y, w, z])


def builtin_generator(name: str, **params) -> DataGenerator:
    """Validate parameters and build a generator (``normal`` or ``linear-iv``)."""
    if name == "normal":
        unknown = set(params) - {"theta0", "sigma2"}
        if unknown:
            raise ConfigurationError(f"generator 'normal': unknown parameters {sorted(unknown)}")
        theta0 = np.atleast_1d(np.asarray(params.get("theta0", 0.0), dtype=float))
        sigma2 = float(params.get("sigma2", 1.0))
        if not sigma2 > 0:
            raise ConfigurationError(f"generator 'normal': sigma2 must be positive, got {sigma2}")
        return DataGenerator(name, {"sigma2": sigma2}, theta0)
    if name == "linear-iv":
        unknown = set(params) - {"theta0", "pi", "sigma_z", "sigma_u2", "sigma_e2", "rho"}
        if unknown:
            raise ConfigurationError(f"generator 'linear-iv': unknown parameters {sorted(unknown)}")
        theta0 = np.atleast_1d(np.asarray(params.get("theta0", [1.0]), dtype=float))
        d = theta0.size
        pi = np.asarray(params.get("pi", np.ones((2, d))), dtype=float).reshape(-1, d)
        k = pi.shape[0]
        sigma_z = np.asarray(params.get("sigma_z", np.eye(k)), dtype=float)
        sigma_u2 = float(params.get("sigma_u2", 1.0))
        sigma_e2 = float(params.get("sigma_e2", 1.0))
        rho = float(params.get("rho", 0.5))
        if k < d:
            raise ConfigurationError(f"generator 'linear-iv': need k >= d, got pi of shape {pi.shape}")
        if sigma_u2 <= 0 or sigma_e2 <= 0:
            raise ConfigurationError("generator 'linear-iv': variances must be positive")
        if not abs(rho) < 1:
            raise ConfigurationError(f"generator 'linear-iv': |rho| must be < 1, got {rho}")
        if sigma_z.shape != (k, k) or np.linalg.eigvalsh(0.5 * (sigma_z + sigma_z.T))[0] <= 0:
            raise ConfigurationError("generator 'linear-iv': sigma_z must be a positive definite k x k matrix")
        return DataGenerator(name, {"pi": pi.tolist(), "sigma_z": sigma_z.tolist(), "sigma_u2": sigma_u2,
                                    "sigma_e2": sigma_e2, "rho": rho}, theta0)
    raise ConfigurationError(f"unknown generator {name!r}; expected 'normal' or 'linear-iv'")


def generate(gen: DataGenerator, n: int, seed: int, *keys: int) -> Sample:
    """Draw ``n`` i.i.d. observations; deterministic in ``(gen, n, seed, keys)``."""
    if n < 1:
        raise ConfigurationError(f"sample size must be positive, got {n}")
    return Sample(gen.draw(int(n), cell_rng(seed, n, *keys)))


def population_matrices(gen: DataGenerator, model: MomentModel):
    """Closed-form ``D0 = E[grad Phi(theta0, X)]`` and ``V0 = E[Phi Phi^T]``."""
    t = gen.theta0
    if gen.name == "normal" and model.name == "mean":
        return np.array([[-1.0]]), np.array([[gen.params["sigma2"]]])
    if gen.name == "normal" and model.name == "mean-variance":
        s2 = gen.params["sigma2"]
        if not np.isclose(model.params["sigma2"], s2):
            raise ConfigurationError("mean-variance model and normal generator disagree on sigma2")
        th = t[0]
        D0 = np.array([[-1.0, -2.0 * th]])
        V0 = np.array([[s2, 2 * th * s2], [2 * th * s2, 2 * s2 * s2 + 4 * th * th * s2]])
        return D0, V0
    if gen.name == "linear-iv" and model.name == "linear-iv":
        pi = np.asarray(gen.params["pi"])
        sz = np.asarray(gen.params["sigma_z"])
        if pi.shape != (model.k, model.d):
            raise ConfigurationError("linear-iv model and generator disagree on (k, d)")
        return -(pi.T @ sz), gen.params["sigma_u2"] * sz
    raise ConfigurationError(f"no closed-form moments for generator {gen.name!r} with model {model.name!r}")


def efficient_variance(gen: DataGenerator, model: MomentModel) -> np.ndarray:
    """Asymptotic variance ``(D0 V0^-1 D0^T)^-1`` of root-n times the estimation error."""
    D0, V0 = population_matrices(gen, model)
    return np.linalg.inv(D0 @ np.linalg.solve(V0, D0.T))


@dataclass
class EfficiencyReport:
    rows: list
    summary: list
    pairwise: list
    excluded: int
    attempted: int
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "version": __version__,
            "rng": RNG_FAMILY,
            "config": self.config,
            "summary": self.summary,
            "pairwise": self.pairwise,
            "excluded": self.excluded,
            "attempted": self.attempted,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# memgel {__version__}\n")
        buf.write(f"# config: {json.dumps(self.config, sort_keys=True)}\n")
        d = max((len(r["theta"]) for r in self.rows), default=1)
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["replication", "n", "kernel", *[f"theta{j}" for j in range(d)], "converged",
                         "weights_min", *[f"std_error{j}" for j in range(d)]])
        for r in self.rows:
            theta = r["theta"] or [float("nan")] * d
            se = r["std_error"] or [float("nan")] * d
            writer.writerow([r["replication"], r["n"], r["kernel"], *map(repr, theta), int(r["converged"]),
                             repr(r["weights_min"]), *map(repr, se)])
        return buf.getvalue()


def monte_carlo(gen: DataGenerator, model: MomentModel, kernels, n_grid, replications: int, seed: int,
                options: SolverOptions | None = None, workers: int = 1, config: dict | None = None) -> EfficiencyReport:
    """
    Sampling behaviour of the estimator for several kernels.

    For each kernel and sample size: bias, variance and MSE of theta_hat,
    the variance of ``sqrt(n) (theta_hat - theta0)`` against the efficient
    variance, and coverage of the 95% Wald interval. For each kernel pair:
    the median of ``sqrt(n) ||theta_hat_1 - theta_hat_2||``. All kernels see
    the same samples. Failed fits are excluded and counted; more than 20%
    exclusions raise ExperimentAbortedError.
    """
    if replications < 1:
        raise ConfigurationError("replications must be positive")
    kernels = [builtin_kernel(k) if isinstance(k, str) else k for k in kernels]
    n_grid = [int(n) for n in n_grid]
    opts = options or SolverOptions()
    avar = efficient_variance(gen, model)
    theta0 = gen.theta0

    def unit(cell):
        n, r = cell
        sample = generate(gen, n, seed, r)
        out = []
        for kern in kernels:
            try:
                rep = estimate(model, sample, kern, opts)
                out.append({"replication": r, "n": n, "kernel": kern.name, "theta": rep.theta_hat.tolist(),
                            "converged": rep.solution.converged, "weights_min": float(rep.weights.min()),
                            "std_error": rep.std_errors.tolist()})
            except ESTIMATION_ERRORS as exc:
                logger.info("replication %d (n=%d, %s) excluded: %s", r, n, kern.name, exc)
                out.append({"replication": r, "n": n, "kernel": kern.name, "theta": None,
                            "converged": False, "weights_min": float("nan"), "std_error": None})
        return out

    cells = [(n, r) for n in n_grid for r in range(replications)]
    rows = [row for block in map_ordered(unit, cells, workers) for row in block]
    excluded = sum(r["theta"] is None for r in rows)
    if excluded > MAX_EXCLUDED_FRACTION * len(rows):
        raise ExperimentAbortedError(f"{excluded} of {len(rows)} fits failed (limit {MAX_EXCLUDED_FRACTION:.0%})")

    z = 1.959963984540054
    summary = []
    for kern in kernels:
        for n in n_grid:
            ok = [r for r in rows if r["kernel"] == kern.name and r["n"] == n and r["theta"] is not None]
            th = np.array([r["theta"] for r in ok])
            se = np.array([r["std_error"] for r in ok])
            err = th - theta0
            var = th.var(axis=0, ddof=1) if len(ok) > 1 else np.full(theta0.shape, np.nan)
            covered = np.abs(err) <= z * se
            summary.append({
                "kernel": kern.name, "n": n, "count": len(ok),
                "excluded": replications - len(ok),
                "bias": err.mean(axis=0).tolist(),
                "variance": var.tolist(),
                "mse": (err ** 2).mean(axis=0).tolist(),
                "scaled_variance": (n * var).tolist(),
                "efficient_variance": np.diag(avar).tolist(),
                "variance_ratio": (n * var / np.diag(avar)).tolist(),
                "coverage": covered.mean(axis=0).tolist(),
            })
    pairwise = []
    for k1, k2 in itertools.combinations([k.name for k in kernels], 2):
        for n in n_grid:
            a = {r["replication"]: r["theta"] for r in rows if r["kernel"] == k1 and r["n"] == n and r["theta"]}
            b = {r["replication"]: r["theta"] for r in rows if r["kernel"] == k2 and r["n"] == n and r["theta"]}
            common = sorted(set(a) & set(b))
            dist = [np.sqrt(n) * np.linalg.norm(np.subtract(a[i], b[i])) for i in common]
            pairwise.append({"kernels": [k1, k2], "n": n, "count": len(common),
                             "median_scaled_discrepancy": float(np.median(dist)) if dist else float("nan")})
    return EfficiencyReport(rows, summary, pairwise, excluded, len(rows), dict(config or {}))
