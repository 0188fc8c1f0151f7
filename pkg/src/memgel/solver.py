"""
Saddle-point solver for GEL / MEM estimation.

The estimator is ``argmin_theta sup_{gamma, lambda} gamma - P_n[Lambda(gamma +
lambda^T Phi(theta, .))]``. The inner problem is strictly concave in
``x = (gamma, lambda)`` and is solved by damped Newton ascent. The outer
problem minimizes the resulting profile over the parameter box: a coarse
multistart grid followed by projected Newton descent whose curvature model is
the Schur complement of the joint saddle Hessian.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg

from .errors import (
    ConditioningError,
    ConfigurationError,
    ConsistencyError,
    EvaluationError,
    GloballyInfeasibleError,
    InfeasibleError,
)
from .kernels import DivergenceKernel, divergence_value
from .models import MomentModel, Sample, theta_grid

__all__ = [
    "SolverOptions",
    "InnerSolution",
    "SaddleSolution",
    "inner_maximize",
    "profile_objective",
    "profile_hessian",
    "outer_minimize",
    "newton_blocks",
    "first_order_system",
    "schur_update",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverOptions:
    """Tolerances and iteration caps. All fields are echoed into reports."""

    inner_tol: float = 1e-10
    max_inner_iter: int = 200
    armijo: float = 1e-4
    backtrack: float = 0.5
    value_cap: float = 1e12
    escape_radius: float = 1e10
    grid_points: int = 8
    outer_tol: float = 1e-10
    step_tol: float = 1e-12
    max_outer_iter: int = 100
    value_tol: float = 1e-10

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class InnerSolution:
    gamma: float
    lam: np.ndarray
    value: float
    converged: bool
    iterations: int
    grad_norm: float
    history: list = field(default_factory=list, repr=False)

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([[self.gamma], self.lam])


@dataclass
class SaddleSolution:
    theta_hat: np.ndarray
    inner: InnerSolution
    weights: np.ndarray
    divergence: float
    rho: float
    value: float
    negative_weights: int
    trace: list = field(default_factory=list, repr=False)
    model: MomentModel | None = field(default=None, repr=False)
    sample: Sample | None = field(default=None, repr=False)

    @property
    def converged(self) -> bool:
        return self.inner.converged and bool(self.trace) and self.trace[-1]["converged"]


# --- inner problem ---------------------------------------------------------------

def _design(phi: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(phi.shape[0]), phi])


def _inner_value(U, x, kernel):
    s = U @ x
    if not np.all(kernel.in_domain(s)):
        return -np.inf
    L = kernel.lam(s)
    if not np.all(np.isfinite(L)):
        return -np.inf
    return x[0] - L.mean()


def _solve_inner(U, kernel: DivergenceKernel, opts: SolverOptions, start=None, theta=None) -> InnerSolution:
    """Damped Newton ascent on ``x -> x[0] - mean(Lambda(U @ x))``."""
    n, m = U.shape
    x = np.zeros(m)
    f = 0.0
    if start is not None:
        start = np.asarray(start, dtype=float)
        fs = _inner_value(U, start, kernel)
        if np.isfinite(fs):
            x, f = start.copy(), fs
    e0 = np.zeros(m)
    e0[0] = 1.0
    scale = max(1.0, float(np.abs(U).max()))
    history = [f]
    gnorm = np.inf
    for it in range(opts.max_inner_iter + 1):
        s = U @ x
        a = kernel.lam1(s)
        g = e0 - U.T @ a / n
        gnorm = float(np.linalg.norm(g))
        if gnorm <= opts.inner_tol:
            return InnerSolution(float(x[0]), x[1:].copy(), float(f), True, it, gnorm, history)
        if it == opts.max_inner_iter:
            break
        b = kernel.lam2(s)
        M = (U * b[:, None]).T @ U / n
        evals, evecs = np.linalg.eigh(M)
        top = evals[-1]
        if not (np.isfinite(top) and top > 0):
            raise ConditioningError("inner Hessian is not negative definite", eigenvalue=float(evals[0]))
        # near-null curvature directions get a huge step; unbounded ascent then trips the escape test
        p = evecs @ ((evecs.T @ g) / np.maximum(evals, 1e-12 * top))
        slope = float(g @ p)
        t = 1.0
        while True:
            xn = x + t * p
            fn = _inner_value(U, xn, kernel)
            if np.isfinite(fn):
                if fn >= f + opts.armijo * t * slope:
                    break
                tiny = 1e-13 * (1.0 + abs(f))
                if t * slope <= tiny and fn >= f - tiny:
                    break
            t *= opts.backtrack
            if t < 1e-20:
                raise ConditioningError(
                    f"inner line search stalled with gradient norm {gnorm:.3g}",
                    eigenvalue=float(evals[0]),
                )
        if fn < f - 1e-12 * (1.0 + abs(f)):
            raise ConsistencyError(f"inner objective decreased from {f!r} to {fn!r}")
        x, f = xn, fn
        history.append(f)
        if f > opts.value_cap or np.linalg.norm(x) * scale > opts.escape_radius:
            direction = p / np.linalg.norm(p)
            raise InfeasibleError("infeasible-at-theta: inner supremum is unbounded", theta, direction)
    return InnerSolution(float(x[0]), x[1:].copy(), float(f), False, opts.max_inner_iter, gnorm, history)


def inner_maximize(model: MomentModel, sample: Sample, kernel: DivergenceKernel, theta,
                   options: SolverOptions | None = None, start=None) -> InnerSolution:
    """
    Maximize ``gamma - P_n[Lambda(gamma + lambda^T Phi(theta, .))]`` over (gamma, lambda).

    Starts at the origin (or ``start`` if it lies in the kernel domain).
    Raises InfeasibleError when the supremum is unbounded, which happens
    exactly when the moment constraints admit no weights in the interior of
    the prior support.
    """
    opts = options or SolverOptions()
    theta = np.asarray(theta, dtype=float).reshape(model.d)
    phi = model.evaluate(theta, sample.data)
    return _solve_inner(_design(phi), kernel, opts, start, theta)


# --- profile objective ------------------------------------------------------------

@dataclass
class _Profile:
    theta: np.ndarray
    inner: InnerSolution
    value: float
    grad: np.ndarray
    hess: np.ndarray | None = None
    gauss_newton: np.ndarray | None = None


def _profile(model, sample, kernel, theta, opts, start=None, hessian=False) -> _Profile:
    X = sample.data
    phi = model.evaluate(theta, X)
    U = _design(phi)
    inner = _solve_inner(U, kernel, opts, start, theta)
    x = inner.x
    lam = inner.lam
    s = U @ x
    a = kernel.lam1(s)
    n = X.shape[0]
    grad_phi = np.asarray(model.grad_phi(theta, X), dtype=float)  # (n, d, k)
    gl = grad_phi @ lam  # (n, d)
    grad = -(gl * a[:, None]).sum(axis=0) / n
    prof = _Profile(theta, inner, inner.value, grad)
    if hessian:
        b = kernel.lam2(s)
        psi = np.asarray(model.hess_phi(theta, X), dtype=float)  # (n, d, d, k)
        f_tt = -(np.einsum("i,ij,il->jl", b, gl, gl) + np.einsum("i,ijlk,k->jl", a, psi, lam)) / n
        J = np.concatenate([np.zeros((n, model.d, 1)), grad_phi], axis=2)  # (n, d, k+1)
        f_tx = -(np.einsum("i,ij,il->jl", b, gl, U) + np.einsum("i,ijl->jl", a, J)) / n
        M = (U * b[:, None]).T @ U / n
        try:
            c = linalg.cho_factor(M)
        except linalg.LinAlgError:
            raise ConditioningError("inner Hessian is singular at the profile point",
                                    eigenvalue=float(np.linalg.eigvalsh(M)[0])) from None
        gn = f_tx @ linalg.cho_solve(c, f_tx.T)
        prof.gauss_newton = 0.5 * (gn + gn.T)
        h = f_tt + gn
        prof.hess = 0.5 * (h + h.T)
    return prof


def profile_objective(model: MomentModel, sample: Sample, kernel: DivergenceKernel, theta,
                      options: SolverOptions | None = None, start=None):
    """
    Profiled objective and its envelope gradient.

    Returns ``(value, gradient)`` with gradient
    ``-P_n[grad Phi lambda * Lambda'(gamma + lambda^T Phi)]`` at the inner maximizer.
    """
    opts = options or SolverOptions()
    theta = np.asarray(theta, dtype=float).reshape(model.d)
    prof = _profile(model, sample, kernel, theta, opts, start)
    return prof.value, prof.grad


def profile_hessian(model: MomentModel, sample: Sample, kernel: DivergenceKernel, theta,
                    options: SolverOptions | None = None) -> np.ndarray:
    """Second derivative of the profiled objective (joint saddle Hessian, Schur-reduced)."""
    opts = options or SolverOptions()
    theta = np.asarray(theta, dtype=float).reshape(model.d)
    return _profile(model, sample, kernel, theta, opts, hessian=True).hess


# --- Newton blocks ----------------------------------------------------------------

def first_order_system(model: MomentModel, sample: Sample, kernel: DivergenceKernel, theta, v, gamma: float = 0.0):
    """
    The first-order map whose zero is the saddle point.

    Returns ``(h_theta, h_v)`` with ``h_theta = P_n[grad Phi v Lambda'(.)]``
    (length d) and ``h_v = P_n[Phi Lambda'(.)]`` (length k), evaluated at the
    argument ``gamma + v^T Phi(theta, .)``.
    """
    theta = np.asarray(theta, dtype=float).reshape(model.d)
    v = np.asarray(v, dtype=float).reshape(model.k)
    X = sample.data
    phi = model.evaluate(theta, X)
    a = kernel.lam1(gamma + phi @ v)
    grad_phi = np.asarray(model.grad_phi(theta, X), dtype=float)
    return (grad_phi @ v * a[:, None]).mean(axis=0), (phi * a[:, None]).mean(axis=0)


def newton_blocks(model: MomentModel, sample: Sample, kernel: DivergenceKernel, theta, v, gamma: float = 0.0):
    """
    Blocks of the Jacobian ``[[A, D], [D^T, V]]`` of :func:`first_order_system`.

    A = P_n[Psi v Lambda' + (grad Phi v)(grad Phi v)^T Lambda''],
    D = P_n[grad Phi Lambda' + (grad Phi v) Phi^T Lambda''],
    V = P_n[Phi Phi^T Lambda''], all at the argument ``gamma + v^T Phi``.
    """
    theta = np.asarray(theta, dtype=float).reshape(model.d)
    v = np.asarray(v, dtype=float).reshape(model.k)
    X = sample.data
    n = X.shape[0]
    phi = model.evaluate(theta, X)
    s = gamma + phi @ v
    if not np.all(kernel.in_domain(s)):
        bad = int(np.argmax(~kernel.in_domain(s)))
        raise EvaluationError(f"kernel {kernel.name!r} evaluated outside its domain at row {bad}")
    a, b = kernel.lam1(s), kernel.lam2(s)
    grad_phi = np.asarray(model.grad_phi(theta, X), dtype=float)
    psi = np.asarray(model.hess_phi(theta, X), dtype=float)
    gv = grad_phi @ v
    A = (np.einsum("i,ijlk,k->jl", a, psi, v) + np.einsum("i,ij,il->jl", b, gv, gv)) / n
    D = (np.einsum("i,ijk->jk", a, grad_phi) + np.einsum("i,ij,ik->jk", b, gv, phi)) / n
    V = (phi * b[:, None]).T @ phi / n
    return A, D, V


def schur_update(D, V, g) -> np.ndarray:
    """
    Parameter block of the bordered Newton step: ``-(D V^-1 D^T)^-1 D V^-1 g``.

    Uses Cholesky factors of ``V`` and of the d x d complement.
    """
    D = np.atleast_2d(np.asarray(D, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    g = np.asarray(g, dtype=float).reshape(V.shape[0])
    try:
        cv = linalg.cho_factor(V)
    except linalg.LinAlgError:
        raise ConditioningError("V is not positive definite",
                                eigenvalue=float(np.linalg.eigvalsh(V)[0])) from None
    VinvDt = linalg.cho_solve(cv, D.T)
    S = D @ VinvDt
    try:
        cs = linalg.cho_factor(0.5 * (S + S.T))
    except linalg.LinAlgError:
        raise ConditioningError("D V^-1 D^T is not positive definite",
                                eigenvalue=float(np.linalg.eigvalsh(0.5 * (S + S.T))[0])) from None
    return -linalg.cho_solve(cs, VinvDt.T @ g)


def _rho(model, sample, kernel, theta, inner) -> float:
    A, D, V = newton_blocks(model, sample, kernel, theta, inner.lam, inner.gamma)
    J = np.block([[A, D], [D.T, V]])
    return float(np.abs(np.linalg.eigvalsh(0.5 * (J + J.T))).min())


# --- outer problem ----------------------------------------------------------------

def _map(fn, items, workers):
    if workers is None or workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _safe_profile(model, sample, kernel, theta, opts, start=None, hessian=False):
    try:
        return _profile(model, sample, kernel, theta, opts, start, hessian)
    except (InfeasibleError, ConditioningError) as exc:
        logger.debug("profile failed at theta=%s: %s", theta, exc)
        return None


def _grid_starts(values: np.ndarray, shape) -> list[int]:
    """Indices of finite grid values that are no larger than any axis neighbour."""
    vals = values.reshape(shape)
    starts = []
    for idx in np.ndindex(*shape):
        v = vals[idx]
        if not np.isfinite(v):
            continue
        best = True
        for ax in range(len(shape)):
            for step in (-1, 1):
                j = list(idx)
                j[ax] += step
                if 0 <= j[ax] < shape[ax] and vals[tuple(j)] < v:
                    best = False
        if best:
            starts.append(int(np.ravel_multi_index(idx, shape)))
    return starts


def _descend(model, sample, kernel, theta0, start_x, opts) -> tuple[_Profile, dict]:
    lo, hi = model.lower, model.upper
    theta = np.asarray(theta0, dtype=float)
    prof = _profile(model, sample, kernel, theta, opts, start_x, hessian=True)
    record = {"start": theta.tolist(), "iterations": 0, "converged": False, "reason": "max-iter"}
    for it in range(opts.max_outer_iter):
        record["iterations"] = it
        g = prof.grad
        free = ~(((theta <= lo) & (g > 0)) | ((theta >= hi) & (g < 0)))
        if np.linalg.norm(g[free]) <= opts.outer_tol:
            record.update(converged=True, reason="gradient")
            break
        p = np.zeros_like(theta)
        gf = g[free]
        for H in (prof.hess, prof.gauss_newton):
            Hf = H[np.ix_(free, free)]
            try:
                c = linalg.cho_factor(Hf)
            except linalg.LinAlgError:
                continue
            p[free] = -linalg.cho_solve(c, gf)
            break
        else:
            p[free] = -gf
        f = prof.value
        gnorm = np.linalg.norm(g)
        t = 1.0
        accepted = None
        while t >= 1e-12:
            trial = np.clip(theta + t * p, lo, hi)
            step = trial - theta
            if np.linalg.norm(step) < opts.step_tol:
                break
            cand = _safe_profile(model, sample, kernel, trial, opts, prof.inner.x, hessian=True)
            if cand is not None:
                if cand.value <= f + opts.armijo * float(g @ step):
                    accepted = cand
                    break
                tiny = 1e-14 * (1.0 + abs(f))
                if abs(cand.value - f) <= tiny and np.linalg.norm(cand.grad) < gnorm:
                    accepted = cand
                    break
            t *= 0.5
        if accepted is None:
            record.update(converged=True, reason="step")
            break
        step_norm = float(np.linalg.norm(accepted.theta - theta))
        theta, prof = accepted.theta, accepted
        if step_norm < opts.step_tol:
            record.update(converged=True, reason="step")
            break
    record.update(theta=theta.tolist(), value=prof.value, grad_norm=float(np.linalg.norm(prof.grad)))
    return prof, record


def outer_minimize(model: MomentModel, sample: Sample, kernel: DivergenceKernel,
                   options: SolverOptions | None = None, workers: int = 1) -> SaddleSolution:
    """
    Minimize the profiled objective over the parameter box.

    The profile is evaluated on a cell-centre grid with ``grid_points`` points
    per coordinate; every finite grid value that is a discrete local minimum
    seeds a projected Newton descent. Local solutions whose values agree within
    ``value_tol`` are ranked by divergence, then lexicographically by theta.
    """
    opts = options or SolverOptions()
    if sample.q != model.q:
        raise ConfigurationError(f"model {model.name!r} expects {model.q} observation columns, sample has {sample.q}")
    grid = theta_grid(model, opts.grid_points)
    evals = _map(lambda th: _safe_profile(model, sample, kernel, th, opts), list(grid), workers)
    values = np.array([np.inf if e is None else e.value for e in evals])
    if not np.isfinite(values).any():
        raise GloballyInfeasibleError(
            f"globally infeasible: kernel {kernel.name!r} admits no bounded inner problem on the "
            f"{opts.grid_points}-point grid over the parameter box"
        )
    starts = _grid_starts(values, (opts.grid_points,) * model.d)

    def run(i):
        try:
            return _descend(model, sample, kernel, grid[i], evals[i].inner.x, opts)
        except (InfeasibleError, ConditioningError) as exc:
            logger.debug("local descent from %s failed: %s", grid[i], exc)
            return None

    results = [r for r in _map(run, starts, workers) if r is not None]
    if not results:
        raise ConditioningError("every local descent failed")

    candidates = []
    for prof, record in results:
        weights = kernel.lam1(_design(model.evaluate(prof.theta, sample.data)) @ prof.inner.x)
        try:
            div = divergence_value(kernel, weights)
        except ValueError:
            div = np.inf
        candidates.append((prof, record, weights, div))
    best_value = min(c[0].value for c in candidates)
    tied = [c for c in candidates if c[0].value <= best_value + opts.value_tol]
    tied.sort(key=lambda c: (c[3], tuple(c[0].theta)))
    prof, record, weights, div = tied[0]
    if not prof.inner.converged:
        raise ConditioningError("inner problem did not converge at the selected solution")
    trace = [r for _, r, _, _ in candidates]
    trace.remove(record)
    trace.append(record)
    return SaddleSolution(
        theta_hat=prof.theta.copy(),
        inner=prof.inner,
        weights=weights,
        divergence=div,
        rho=_rho(model, sample, kernel, prof.theta, prof.inner),
        value=prof.value,
        negative_weights=int(np.sum(weights < 0)),
        trace=trace,
        model=model,
        sample=sample,
    )
