import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import KERNELS
from memgel import (
    ConfigurationError,
    ConsistencyError,
    InfeasibleError,
    MomentModel,
    Sample,
    WeightedSample,
    builtin_kernel,
    builtin_model,
    estimate,
    feasibility_check,
    inner_maximize,
    mem_weights,
    outer_minimize,
)
from memgel.estimator import phi_feasibility

# oracle values (tests/oracles.py) for seed-1234 standard normals, n = 50, box [-1, 1]
SEED_1234_THETA = {"quadratic-CUE": -0.1593109619961413, "exponential-EL": -0.125508583899002,
                   "poisson-ET": -0.13579055795288297}

OUTLIER_DATA = np.array([-1.6, -1.5, -1.4, -1.3, 1.3, 1.4, 1.5, 1.6, 3.0])


def test_mean_standard_error(data123, mean_model):
    rep = estimate(mean_model, data123, "exponential-EL")
    assert rep.theta_hat[0] == pytest.approx(2.0, abs=1e-10)
    assert rep.std_errors[0] == pytest.approx(np.sqrt((2 / 3) / 3), abs=1e-12)
    assert rep.std_errors[0] == pytest.approx(0.4714, abs=5e-5)


def test_kernel_invariance_just_identified(data123, mean_model):
    reps = [estimate(mean_model, data123, k) for k in KERNELS]
    for rep in reps[1:]:
        assert rep.theta_hat[0] == pytest.approx(reps[0].theta_hat[0], abs=1e-12)
        assert rep.std_errors[0] == pytest.approx(reps[0].std_errors[0], abs=1e-12)


@pytest.mark.parametrize("name", KERNELS)
def test_seeded_dataset_matches_oracles(mv_model, name):
    sample = Sample(np.random.default_rng(1234).standard_normal(50))
    rep = estimate(mv_model, sample, name)
    assert rep.theta_hat[0] == pytest.approx(SEED_1234_THETA[name], abs=1e-6)
    assert np.all(np.isfinite(rep.std_errors)) and rep.diagnostics.passed


def test_seeded_oracle_values_reproduce(mv_model):
    import oracles

    X = np.random.default_rng(1234).standard_normal((50, 1))
    pf = lambda t: mv_model.phi(np.array([t]), X)  # noqa: E731
    with np.errstate(all="ignore"):
        got = {"quadratic-CUE": oracles.cue_oracle(pf, -1, 1), "exponential-EL": oracles.el_oracle(pf, -1, 1),
               "poisson-ET": oracles.et_oracle(pf, -1, 1)}
    for name, value in got.items():
        assert value == pytest.approx(SEED_1234_THETA[name], abs=1e-9)


def test_mem_weights_just_identified(data123, mean_model):
    sol = outer_minimize(mean_model, data123, builtin_kernel("poisson-ET"))
    ws = mem_weights(sol, builtin_kernel("poisson-ET"))
    np.testing.assert_allclose(ws.weights, 1.0, atol=1e-9)
    assert ws.expect(data123.data)[0] == pytest.approx(2.0)


def test_mem_weights_el_and_cue_identities(mv_model):
    sample = Sample(np.random.default_rng(1234).standard_normal(50))
    for name in ("exponential-EL", "quadratic-CUE"):
        k = builtin_kernel(name)
        sol = outer_minimize(mv_model, sample, k)
        s = sol.inner.gamma + mv_model.phi(sol.theta_hat, sample.data) @ sol.inner.lam
        expected = 1 / (1 - s) if name == "exponential-EL" else 1 + s
        np.testing.assert_allclose(mem_weights(sol, k).weights, expected, rtol=1e-13)


def test_negative_cue_weights_reported(mv_model):
    rep = estimate(mv_model, Sample(OUTLIER_DATA), "quadratic-CUE")
    assert rep.weights_summary["negative"] >= 1
    assert rep.weights[-1] < 0  # the outlier
    assert any("negative weights" in w for w in rep.warnings)
    assert rep.solution.negative_weights == rep.weights_summary["negative"]


def test_positive_kernels_give_positive_weights(mv_model):
    for name in ("exponential-EL", "poisson-ET"):
        assert estimate(mv_model, Sample(OUTLIER_DATA), name).weights.min() > 0


def test_mem_weights_consistency_error(data123, mean_model):
    k = builtin_kernel("poisson-ET")
    sol = outer_minimize(mean_model, data123, k)
    sol.inner.lam = sol.inner.lam + 0.3
    with pytest.raises(ConsistencyError):
        mem_weights(sol, k)


def test_weighted_sample_mass(data123):
    with pytest.raises(ConsistencyError):
        WeightedSample(data123, np.array([1.0, 1.0, 1.1]))


def test_too_few_observations():
    with pytest.raises(ConfigurationError, match="k \\+ 1"):
        estimate(builtin_model("mean-variance"), Sample([0.1, 0.2]), "poisson-ET")


def test_report_serialization(data123, mean_model):
    rep = estimate(mean_model, data123, "exponential-EL")
    doc = json.loads(rep.to_json(config={"seed": 1}))
    for key in ("theta_hat", "std_errors", "gamma", "lambda", "weights", "divergence", "diagnostics", "options"):
        assert key in doc
    assert doc["std_error_kind"] == "plug-in asymptotic"
    assert doc["config"] == {"seed": 1}
    assert doc["options"]["grid_points"] == 8
    assert "theta0" in rep.table() and "plug-in asymptotic" in rep.table()


# --- feasibility -----------------------------------------------------------------

def test_feasibility_one_dimensional(mean_model):
    assert feasibility_check(mean_model, Sample([-1.0, 2.0, 0.5]), [0.0]) == "feasible"
    assert feasibility_check(mean_model, Sample([1.0, 2.0, 1.5]), [0.0]) == "infeasible"
    assert feasibility_check(mean_model, Sample([0.0, 2.0, 1.0]), [0.0]) == "indeterminate"


def test_feasibility_triangle():
    el = builtin_kernel("exponential-EL")
    assert phi_feasibility(np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]]), el) == "feasible"
    assert phi_feasibility(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]), el) == "infeasible"


def test_feasibility_full_line_kernel(mean_model):
    # with unrestricted weight signs only the affine constraints matter
    assert feasibility_check(mean_model, Sample([1.0, 2.0, 1.5]), [0.0], "quadratic-CUE") == "feasible"
    assert phi_feasibility(np.ones((4, 1)), builtin_kernel("quadratic-CUE")) == "infeasible"


def test_feasibility_by_ascent_for_larger_k():
    rng = np.random.default_rng(4)
    et = builtin_kernel("poisson-ET")
    pts = rng.standard_normal((40, 3))
    assert phi_feasibility(pts, et) == "feasible"
    assert phi_feasibility(np.abs(pts) + 0.1, et) == "infeasible"


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(4, 15), elements=st.floats(-3, 3)), st.floats(-1, 1),
       st.sampled_from(["exponential-EL", "poisson-ET"]))
def test_feasibility_agrees_with_inner(x, theta, name):
    model = builtin_model("mean-variance", sigma2=1.0, bounds=[[-1.0, 1.0]])
    sample = Sample(x)
    verdict = feasibility_check(model, sample, [theta], name)
    if verdict == "infeasible":
        with pytest.raises(InfeasibleError):
            inner_maximize(model, sample, builtin_kernel(name), [theta])


# --- invariances -----------------------------------------------------------------

@pytest.mark.parametrize("name", KERNELS)
def test_permutation_invariance_bitwise(mv_model, name):
    x = np.random.default_rng(1234).standard_normal(50)
    perm = np.random.default_rng(9).permutation(50)
    a = estimate(mv_model, Sample(x), name)
    b = estimate(mv_model, Sample(x[perm]), name)
    assert a.theta_hat.tobytes() == b.theta_hat.tobytes()
    assert a.divergence == b.divergence
    assert np.sort(a.weights).tobytes() == np.sort(b.weights).tobytes()
    assert a.weights[perm].tobytes() == b.weights.tobytes()


def scaled_model(base: MomentModel, A: np.ndarray) -> MomentModel:
    return MomentModel(f"{base.name}-scaled", lambda t, X: base.phi(t, X) @ A.T,
                       lambda t, X: base.grad_phi(t, X) @ A.T, lambda t, X: base.hess_phi(t, X) @ A.T,
                       base.d, base.k, base.q, base.lower, base.upper)


@settings(max_examples=12, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(KERNELS))
def test_moment_scaling_invariance(seed, name):
    rng = np.random.default_rng(seed)
    base = builtin_model("mean-variance", sigma2=1.0, bounds=[[-1.0, 1.0]])
    A = rng.standard_normal((2, 2)) + 2 * np.eye(2)
    sample = Sample(rng.standard_normal(40))
    try:
        a = estimate(base, sample, name)
    except InfeasibleError:
        return
    b = estimate(scaled_model(base, A), sample, name)
    assert b.theta_hat[0] == pytest.approx(a.theta_hat[0], abs=1e-8)
    # multipliers transform contravariantly
    np.testing.assert_allclose(A.T @ b.lam, a.lam, atol=1e-7)


@pytest.mark.parametrize("seed", range(5))
def test_el_divergence_identity(mv_model, seed):
    rep = estimate(mv_model, Sample(np.random.default_rng(seed).standard_normal(30)), "exponential-EL")
    w = rep.weights
    assert rep.divergence == pytest.approx(np.mean(w - 1 - np.log(w)), abs=1e-10)
    assert rep.divergence == pytest.approx(-np.mean(np.log(w)), abs=1e-10)
