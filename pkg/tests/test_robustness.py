import json
import math
import warnings

import numpy as np
import pytest

from memgel import ConfigurationError, Sample, builtin_model, estimate
from memgel.robustness import (
    ApproxFamily,
    UnboundedCurvatureWarning,
    additive_family,
    approx_model,
    estimate_approx,
    oscillatory_family,
    parse_rate,
    parse_schedule,
    perturbation_sup,
    rate_experiment,
)
from memgel.simulation import builtin_generator


def cue_family(scale=1.0):
    model = builtin_model("mean-variance", sigma2=1.0, bounds=[[-0.5, 1.5]])
    return additive_family(model, scale, [1.0, 1.0], rate="m")


def test_parse_rate():
    for spec, p in (("m", 1.0), ("sqrt(m)", 0.5), ("m^2", 2.0), ("m**1.5", 1.5)):
        fn, got = parse_rate(spec)
        assert got == p and fn(16) == pytest.approx(16 ** p)
    with pytest.raises(ConfigurationError):
        parse_rate("log(m)")


def test_parse_schedule():
    assert parse_schedule("n")(400) == 400
    assert parse_schedule("sqrt(n)")(401) == 21
    assert parse_schedule("n^0.75")(16) == 8
    with pytest.raises(ConfigurationError):
        parse_schedule("2n")


def test_additive_perturbation_size():
    base = builtin_model("mean")
    fam = additive_family(base, 3.0, rate="m", g=lambda X: np.cos(X[:, 0]))
    X = np.linspace(-4, 4, 50)[:, None]
    for m in (1, 7, 100):
        diff = approx_model(fam, m).phi(np.array([0.4]), X) - base.phi(np.array([0.4]), X)
        np.testing.assert_allclose(np.abs(diff[:, 0]), 3.0 * np.abs(np.cos(X[:, 0])) / m, rtol=1e-12, atol=1e-15)


def test_infinite_index_returns_base(data123):
    fam = additive_family(builtin_model("mean"), 1.0)
    assert approx_model(fam, math.inf) is fam.base
    a = estimate(fam.base, data123, "poisson-ET")
    b = estimate(approx_model(fam, math.inf), data123, "poisson-ET")
    assert a.theta_hat.tobytes() == b.theta_hat.tobytes()


def test_oscillatory_sup_norm_decay():
    fam = oscillatory_family(builtin_model("mean-variance"), 2.0, rate="m")
    X = np.linspace(-math.pi, math.pi, 20001)[:, None]
    thetas = np.array([[-1.0], [0.0], [1.0]])
    for m in (4, 16, 64, 256):
        sup = perturbation_sup(fam, m, X, thetas)
        phi_sup = sup[:, 0].max()
        assert phi_sup <= 2.0 * math.sqrt(2) / m + 1e-12
        assert phi_sup >= 0.99 * 2.0 * math.sqrt(2) / m
        # only theta-derivatives matter, and they are unperturbed
        assert sup[:, 1].max() == 0.0 and sup[:, 2].max() == 0.0


def test_approx_model_passes_derivative_checks():
    fam = cue_family()
    model = approx_model(fam, 8)
    assert model.d == 1 and model.k == 2 and "m=8" in model.name


def test_rough_perturbation_rejected():
    base = builtin_model("mean")
    fam = ApproxFamily(base, lambda m, t, X: np.sin(m * t[0]) * np.ones((X.shape[0], 1)) / m,
                       lambda m: float(m), name="theta-dependent")  # derivative omitted
    with pytest.raises(ConfigurationError, match="approximation rejected"):
        approx_model(fam, 5)
    fam = ApproxFamily(base, fam.perturbation, fam.rate,
                       perturbation_grad=lambda m, t, X: np.cos(m * t[0]) * np.ones((X.shape[0], 1, 1)),
                       perturbation_hess=lambda m, t, X: -m * np.sin(m * t[0]) * np.ones((X.shape[0], 1, 1, 1)))
    approx_model(fam, 5)


def test_index_must_be_positive():
    with pytest.raises(ConfigurationError):
        approx_model(cue_family(), 0)


def test_zero_perturbation_equals_base_estimate():
    sample = Sample(np.random.default_rng(8).standard_normal(30) + 0.5)
    fam = cue_family(scale=0.0)
    a = estimate(fam.base, sample, "quadratic-CUE")
    b = estimate_approx(fam, 16, sample, "quadratic-CUE")
    assert a.theta_hat.tobytes() == b.theta_hat.tobytes()


@pytest.mark.parametrize("m", [1, 4, 32])
def test_shifted_mean_root(data123, m):
    fam = additive_family(builtin_model("mean"), 1.0, rate="m")
    rep = estimate_approx(fam, m, data123, "quadratic-CUE")
    assert rep.theta_hat[0] == pytest.approx(2 + 1 / m, abs=1e-10)


def test_curvature_warning_for_unbounded_kernels(data123):
    fam = additive_family(builtin_model("mean"), 1.0)
    with pytest.warns(UnboundedCurvatureWarning, match="Lambda'' <= K"):
        estimate_approx(fam, 4, data123, "exponential-EL")
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        estimate_approx(fam, 4, data123, "quadratic-CUE")


def test_cue_discrepancy_bounded_by_rate():
    fam = cue_family()
    sample = Sample(np.random.default_rng(31).standard_normal(200) + 0.5)
    exact = estimate(fam.base, sample, "quadratic-CUE").theta_hat
    ms = [4, 8, 16, 32, 64, 128, 256, 512]
    scaled = []
    for m in ms:
        disc = np.linalg.norm(estimate_approx(fam, m, sample, "quadratic-CUE").theta_hat - exact)
        scaled.append(m * disc)
    C = max(scaled)
    assert np.isfinite(C) and C > 0
    # m * discrepancy levels off: the last doublings change it by under 2%
    assert abs(scaled[-1] / scaled[-2] - 1) < 0.02


def small_experiment(workers=1, **kw):
    gen = builtin_generator("normal", theta0=0.5, sigma2=1.0)
    return rate_experiment(cue_family(), gen, [50, 100], [4, 16, 64], "quadratic-CUE", 6, 12,
                           schedules={"linear": "n", "root": "sqrt(n)"}, workers=workers, **kw)


def test_rate_experiment_deterministic():
    a, b = small_experiment(1), small_experiment(4)
    assert a.to_csv() == b.to_csv() and a.to_json() == b.to_json()


def test_rate_experiment_report():
    rep = small_experiment(config={"kernel": "quadratic-CUE"})
    assert all(r["discrepancy"] >= 0 and np.isfinite(r["discrepancy"]) for r in rep.rows)
    assert -1.5 < rep.slope < -0.5 and rep.slope == pytest.approx(rep.slope_vs_m)
    assert set(rep.equivalence) == {"linear", "root"}
    assert [p["m"] for p in rep.equivalence["root"]["path"]] == [8, 10]
    assert {s["n"] for s in rep.sandwich} == {50, 100}
    lines = rep.to_csv().splitlines()
    assert lines[2] == "replication,n,m,phi_m,discrepancy"
    doc = json.loads(rep.to_json())
    assert doc["config"] == {"kernel": "quadratic-CUE"} and "slope" in doc


def test_rate_experiment_validation():
    gen = builtin_generator("normal")
    with pytest.raises(ConfigurationError, match="replications must be positive"):
        rate_experiment(cue_family(), gen, [50], [4], "quadratic-CUE", 0, 1)


def test_rate_experiment_warns_for_el():
    gen = builtin_generator("normal", theta0=0.5, sigma2=1.0)
    with pytest.warns(UnboundedCurvatureWarning):
        rate_experiment(cue_family(), gen, [40], [4, 8], "exponential-EL", 2, 1)
