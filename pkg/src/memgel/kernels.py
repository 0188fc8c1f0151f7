"""
Criterion functions for generalized empirical likelihood.

A kernel is a normalized, strictly convex function ``Lambda`` with
``Lambda(0) = 0`` and ``Lambda'(0) = Lambda''(0) = 1``. Each built-in kernel is
the log-Laplace transform of a unit-mean, unit-variance prior on the
observation weights:

=================  ==================  ===========================
name               prior               Lambda(s)
=================  ==================  ===========================
exponential-EL     Exponential(1)      -log(1 - s),  s < 1
poisson-ET         Poisson(1)          exp(s) - 1
quadratic-CUE      Normal(1, 1)        s + s**2 / 2
=================  ==================  ===========================

The convex conjugate ``Lambda*`` is the f-divergence integrand; it is computed
numerically for every kernel so that custom kernels need nothing beyond
``Lambda`` and its two derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError

__all__ = [
    "DivergenceKernel",
    "BUILTIN_KERNELS",
    "builtin_kernel",
    "conjugate",
    "conjugate_argmax",
    "divergence_value",
]

ArrayFunc = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class DivergenceKernel:
    """
    A normalized convex criterion and its derivatives.

    Parameters
    ----------
    name : str
        Identifier used in reports and configuration files.
    lam, lam1, lam2 : callable
        Vectorized ``Lambda``, ``Lambda'`` and ``Lambda''``. ``lam`` must
        return ``+inf`` outside the effective domain.
    domain_upper, domain_lower : float
        Open effective domain ``(domain_lower, domain_upper)``; must contain 0.
    lambda2_bound : float or None
        Finite bound ``K`` with ``Lambda'' <= K``, or None when unbounded.
    """

    name: str
    lam: ArrayFunc
    lam1: ArrayFunc
    lam2: ArrayFunc
    domain_upper: float = np.inf
    domain_lower: float = -np.inf
    lambda2_bound: float | None = None

    def __post_init__(self):
        if not self.domain_lower < 0.0 < self.domain_upper:
            raise ConfigurationError(
                f"kernel {self.name!r}: domain ({self.domain_lower}, "
                f"{self.domain_upper}) must contain 0"
            )

    def in_domain(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        return (s > self.domain_lower) & (s < self.domain_upper)

    @property
    def positive_weights(self) -> bool:
        """True when ``Lambda'`` only takes positive values on the sampled domain."""
        lo = self.domain_lower if np.isfinite(self.domain_lower) else -700.0
        probe = np.linspace(lo, 0.0, 64)[1:]
        with np.errstate(all="ignore"):
            return bool(np.all(self.lam1(probe) > 0))

    def __repr__(self):
        return f"DivergenceKernel({self.name!r})"


def _el(s):
    s = np.asarray(s, dtype=float)
    out = np.full(s.shape, np.inf)
    ok = s < 1.0
    out[ok] = -np.log1p(-s[ok])
    return out if out.ndim else float(out)


def _el1(s):
    s = np.asarray(s, dtype=float)
    out = np.full(s.shape, np.inf)
    ok = s < 1.0
    out[ok] = 1.0 / (1.0 - s[ok])
    return out if out.ndim else float(out)


def _el2(s):
    s = np.asarray(s, dtype=float)
    out = np.full(s.shape, np.inf)
    ok = s < 1.0
    out[ok] = 1.0 / (1.0 - s[ok]) ** 2
    return out if out.ndim else float(out)


def _et(s):
    with np.errstate(over="ignore"):
        return np.expm1(s)


def _et1(s):
    with np.errstate(over="ignore"):
        return np.exp(s)


def _cue(s):
    s = np.asarray(s, dtype=float)
    return s + 0.5 * s * s


def _cue1(s):
    return 1.0 + np.asarray(s, dtype=float)


def _cue2(s):
    return np.ones_like(np.asarray(s, dtype=float))


BUILTIN_KERNELS = {
    "exponential-EL": dict(lam=_el, lam1=_el1, lam2=_el2, domain_upper=1.0),
    "poisson-ET": dict(lam=_et, lam1=_et1, lam2=_et1),
    "quadratic-CUE": dict(lam=_cue, lam1=_cue1, lam2=_cue2, lambda2_bound=1.0),
}


def builtin_kernel(name: str) -> DivergenceKernel:
    """Return one of the built-in kernels by name."""
    try:
        spec = BUILTIN_KERNELS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown kernel {name!r}; expected one of {sorted(BUILTIN_KERNELS)}"
        ) from None
    return DivergenceKernel(name=name, **spec)


def _lam1_range(kernel: DivergenceKernel, y: np.ndarray):
    """Bracket the root of ``Lambda'(s) = y`` elementwise.

    Returns (lo, hi, attained) with ``Lambda'(lo) <= y <= Lambda'(hi)`` where
    ``attained`` is True.
    """
    up, down = kernel.domain_upper, kernel.domain_lower
    lo = np.full(y.shape, max(-1.0, down / 2 if np.isfinite(down) else -1.0))
    hi = np.full(y.shape, min(1.0, up / 2 if np.isfinite(up) else 1.0))
    attained = np.ones(y.shape, dtype=bool)
    with np.errstate(all="ignore"):
        for _ in range(80):
            need = attained & (kernel.lam1(hi) < y)
            if not need.any():
                break
            lo = np.where(need, hi, lo)
            hi = np.where(need, up - (up - hi) / 4 if np.isfinite(up) else 4 * hi, hi)
        else:
            attained &= kernel.lam1(hi) >= y
        for _ in range(80):
            need = attained & (kernel.lam1(lo) > y)
            if not need.any():
                break
            hi = np.where(need, lo, hi)
            lo = np.where(need, down + (lo - down) / 4 if np.isfinite(down) else 4 * lo, lo)
        else:
            attained &= kernel.lam1(lo) <= y
    return lo, hi, attained


def conjugate_argmax(kernel: DivergenceKernel, y, tol: float = 1e-10, max_iter: int = 200):
    """
    Solve ``Lambda'(s) = y`` by safeguarded Newton iterations.

    Returns
    -------
    s : ndarray or float
        The maximizer of ``s*y - Lambda(s)`` (nan where not attained).
    attained : ndarray of bool or bool
    """
    y = np.asarray(y, dtype=float)
    scalar = y.ndim == 0
    y = np.atleast_1d(y)
    lo, hi, attained = _lam1_range(kernel, y)
    s = np.where(attained, np.clip(0.0, lo, hi), np.nan)
    with np.errstate(all="ignore"):
        for _ in range(max_iter):
            r = kernel.lam1(s) - y
            scale = np.maximum(1.0, np.abs(y))
            done = ~attained | (np.abs(r) <= tol * scale)
            if done.all():
                break
            lo = np.where(r < 0, s, lo)
            hi = np.where(r > 0, s, hi)
            step = s - r / kernel.lam2(s)
            inside = np.isfinite(step) & (step > lo) & (step < hi)
            s = np.where(done, s, np.where(inside, step, 0.5 * (lo + hi)))
    if scalar:
        return float(s[0]), bool(attained[0])
    return s, attained


def conjugate(kernel: DivergenceKernel, y, tol: float = 1e-10):
    """
    Convex conjugate ``Lambda*(y) = sup_s {s*y - Lambda(s)}``.

    Values of ``y`` outside the range of ``Lambda'`` give ``+inf``.
    """
    s, attained = conjugate_argmax(kernel, y, tol=tol)
    with np.errstate(all="ignore"):
        val = np.where(attained, np.asarray(s) * np.asarray(y) - kernel.lam(np.nan_to_num(s)), np.inf)
    return float(val) if np.ndim(val) == 0 else val


def divergence_value(kernel: DivergenceKernel, weights) -> float:
    """f-divergence ``(1/n) sum_i Lambda*(w_i)`` of a reweighted empirical measure.

    Raises ConfigurationError if the weights do not average to one.
    """
    w = np.asarray(weights, dtype=float).ravel()
    if abs(w.mean() - 1.0) > 1e-8:
        raise ConfigurationError(f"weights average to {w.mean():.12g}, expected 1")
    vals = np.atleast_1d(conjugate(kernel, w))
    if not np.all(np.isfinite(vals)):
        return np.inf
    return float(vals.mean())
