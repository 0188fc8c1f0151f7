import json

import numpy as np
import pytest

from conftest import KERNELS
from memgel import ConfigurationError, ExperimentAbortedError, builtin_model, sample_moments
from memgel.simulation import (
    builtin_generator,
    cell_rng,
    efficient_variance,
    generate,
    map_ordered,
    monte_carlo,
    population_matrices,
)

BIG = 10**6


def test_mean_generator_clt_band():
    x = generate(builtin_generator("normal", theta0=0.0, sigma2=1.0), BIG, 1).data[:, 0]
    assert abs(x.mean()) <= 4 / np.sqrt(BIG)


@pytest.mark.parametrize("gen_args, model_args", [
    (("normal", {"theta0": 0.7, "sigma2": 2.0}), ("mean", {})),
    (("normal", {"theta0": 0.7, "sigma2": 2.0}), ("mean-variance", {"sigma2": 2.0})),
    (("linear-iv", {"theta0": [1.5], "pi": [[1.0], [0.5]], "rho": 0.6}), ("linear-iv", {"d": 1, "k": 2})),
    (("linear-iv", {"theta0": [1.0, -1.0], "pi": [[1.0, 0.2], [0.3, 1.0], [0.5, 0.5]],
                    "sigma_z": [[1.0, 0.3, 0.0], [0.3, 1.0, 0.2], [0.0, 0.2, 1.0]], "rho": -0.4}),
     ("linear-iv", {"d": 2, "k": 3})),
])
def test_generator_moment_identity(gen_args, model_args):
    gen = builtin_generator(gen_args[0], **gen_args[1])
    model = builtin_model(model_args[0], **model_args[1])
    sample = generate(gen, BIG, 3)
    phi = model.phi(gen.theta0, sample.data)
    sd = phi.std(axis=0)
    assert np.all(np.abs(phi.mean(axis=0)) <= 4 * sd / np.sqrt(BIG))


@pytest.mark.parametrize("d, k, pi, sigma_z", [
    (1, 2, [[1.0], [0.5]], None),
    (2, 3, [[1.0, 0.2], [0.3, 1.0], [0.5, 0.5]], [[1.0, 0.3, 0.0], [0.3, 1.0, 0.2], [0.0, 0.2, 1.0]]),
])
def test_linear_iv_population_matrices(d, k, pi, sigma_z):
    params = {"theta0": np.ones(d).tolist(), "pi": pi, "rho": 0.5, "sigma_u2": 1.5}
    if sigma_z is not None:
        params["sigma_z"] = sigma_z
    gen = builtin_generator("linear-iv", **params)
    model = builtin_model("linear-iv", d=d, k=k)
    D0, V0 = population_matrices(gen, model)
    sample = generate(gen, BIG, 4)
    _, D, V = sample_moments(model, sample, gen.theta0)
    X = sample.data
    grad = np.asarray(model.grad_phi(gen.theta0, X))
    phi = model.phi(gen.theta0, X)
    outer = phi[:, :, None] * phi[:, None, :]
    assert np.all(np.abs(D - D0) <= 4 * grad.std(axis=0) / np.sqrt(BIG))
    assert np.all(np.abs(V - V0) <= 4 * outer.std(axis=0) / np.sqrt(BIG))


def test_mean_model_efficient_variance():
    gen = builtin_generator("normal", theta0=0.0, sigma2=2.5)
    D0, V0 = population_matrices(gen, builtin_model("mean"))
    assert D0[0, 0] == -1.0 and V0[0, 0] == 2.5
    assert efficient_variance(gen, builtin_model("mean"))[0, 0] == pytest.approx(2.5)


def test_mean_variance_population_matrices_by_simulation():
    gen = builtin_generator("normal", theta0=0.5, sigma2=1.0)
    model = builtin_model("mean-variance", sigma2=1.0)
    D0, V0 = population_matrices(gen, model)
    _, D, V = sample_moments(model, generate(gen, BIG, 5), [0.5])
    np.testing.assert_allclose(D, D0, atol=1e-12)
    np.testing.assert_allclose(V, V0, atol=0.02)


def test_generator_validation():
    with pytest.raises(ConfigurationError, match="positive"):
        builtin_generator("normal", sigma2=0.0)
    with pytest.raises(ConfigurationError, match="rho"):
        builtin_generator("linear-iv", rho=1.0)
    with pytest.raises(ConfigurationError):
        builtin_generator("linear-iv", sigma_u2=-1.0)
    with pytest.raises(ConfigurationError):
        builtin_generator("poisson")
    with pytest.raises(ConfigurationError):
        builtin_generator("normal", mean=1.0)
    with pytest.raises(ConfigurationError):
        generate(builtin_generator("normal"), 0, 1)


def test_generate_deterministic():
    gen = builtin_generator("normal", theta0=1.0)
    a, b = generate(gen, 100, 42, 3), generate(gen, 100, 42, 3)
    assert a.data.tobytes() == b.data.tobytes()
    assert generate(gen, 100, 42, 4).data.tobytes() != a.data.tobytes()


def test_cell_rng_is_philox():
    assert isinstance(cell_rng(1, 2, 3).bit_generator, np.random.Philox)


def test_map_ordered_preserves_order():
    assert map_ordered(lambda v: v * v, list(range(20)), workers=4) == [v * v for v in range(20)]


def small_mc(workers=1, **kw):
    gen = builtin_generator("normal", theta0=0.5, sigma2=1.0)
    model = builtin_model("mean-variance", sigma2=1.0, bounds=[[-0.5, 1.5]])
    return monte_carlo(gen, model, KERNELS, [40, 80], 10, 99, workers=workers, **kw)


def test_monte_carlo_deterministic_across_workers():
    a, b = small_mc(1), small_mc(3)
    assert a.to_csv() == b.to_csv()
    assert a.to_json() == b.to_json()


def test_monte_carlo_report_structure():
    rep = small_mc(config={"seed": 99})
    assert rep.attempted == 2 * 10 * 3 and rep.excluded == 0
    assert {(r["kernel"], r["n"]) for r in rep.summary} == {(k, n) for k in KERNELS for n in (40, 80)}
    assert len(rep.pairwise) == 3 * 2
    lines = rep.to_csv().splitlines()
    assert lines[0].startswith("# memgel ") and lines[1].startswith("# config: ")
    assert lines[2] == "replication,n,kernel,theta0,converged,weights_min,std_error0"
    assert len(lines) == 3 + 60
    doc = json.loads(rep.to_json())
    assert doc["rng"] == "numpy.random.Philox" and doc["config"] == {"seed": 99}


def test_monte_carlo_rejects_zero_replications():
    gen = builtin_generator("normal")
    with pytest.raises(ConfigurationError, match="replications must be positive"):
        monte_carlo(gen, builtin_model("mean"), KERNELS, [20], 0, 1)


def test_monte_carlo_aborts_on_widespread_failure():
    gen = builtin_generator("normal", theta0=0.0)
    model = builtin_model("mean", bounds=[[8.0, 9.0]])  # no feasible theta for positive-weight kernels
    with pytest.raises(ExperimentAbortedError, match="failed"):
        monte_carlo(gen, model, ["exponential-EL"], [20], 5, 1)


@pytest.mark.slow
def test_no_kernel_beats_efficiency_bound():
    gen = builtin_generator("normal", theta0=0.5, sigma2=1.0)
    model = builtin_model("mean-variance", sigma2=1.0, bounds=[[-0.5, 1.5]])
    rep = monte_carlo(gen, model, KERNELS, [200], 300, 5)
    for row in rep.summary:
        assert row["variance_ratio"][0] >= 0.8
        assert abs(row["bias"][0]) < 0.05
