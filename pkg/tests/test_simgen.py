import numpy as np
import pytest

from twostagesem import CATALOG, SemError, SpecError, generate, get_scenario, run_mc
from twostagesem.simgen import (GaussianMixture, IVEstimator, Normal, Scenario, TruthEstimator,
                                TwoStageEstimator, Uniform, reports_from_csv, reports_to_csv)


def test_moment_oracle():
    sc = get_scenario("quadratic-covariate", n=1_000_000)
    d = generate(sc, seed=0, include_latent=True)
    n = len(d)
    var_xi = 1 + sc.gamma1**2
    # MC SE of a sample variance / covariance from the fourth moments
    xi = d["xi"] - d["xi"].mean()
    assert abs(xi.var() - var_xi) < 3 * np.sqrt(np.var(xi**2) / n)
    x1, x2 = d["x1"] - d["x1"].mean(), d["x2"] - d["x2"].mean()
    assert abs(np.mean(x1 * x2) - var_xi) < 3 * np.sqrt(np.var(x1 * x2) / n)


def test_noise_free_is_deterministic():
    zero = Normal(0.0)
    sc = Scenario(n=200, gamma1=0.7, gamma2=-0.3, zeta_tilde=zero, zeta=zero, eps_tilde=zero, eps=zero)
    a, b = generate(sc, seed=4), generate(sc, seed=4)
    assert a.equals(b)
    xi = 0.7 * a["z"]
    np.testing.assert_allclose(a["y1"], 1 + xi + 0.5 * xi**2 - 0.3 * a["z"], rtol=1e-14)
    np.testing.assert_array_equal(a["x1"], a["x3"])


def test_residual_laws():
    rng = np.random.default_rng(0)
    u = Uniform().sample(rng, 400_000)
    assert abs(u.mean()) < 0.01 and u.var() == pytest.approx(1.0, abs=0.01)
    assert np.max(np.abs(u)) <= np.sqrt(3.0)
    g = GaussianMixture(0.25, 0.0, 3.0, 1.0)
    assert g.mean == 2.25
    assert g.sample(rng, 400_000).mean() == pytest.approx(2.25, abs=0.01)
    with pytest.raises(SpecError):
        GaussianMixture(pi=1.0)


def test_catalog():
    assert {"quadratic-normal-n1000", "gmm-n1000", "uniform-zeta-n1000",
            "uniform-eps-n500", "exponential-n1000"} <= set(CATALOG)
    sc = get_scenario("gmm", n=250, seed=3)
    assert (sc.name, sc.n, sc.seed) == ("gmm-n250", 250, 3)
    with pytest.raises(SpecError, match="unknown scenario"):
        get_scenario("nope")


def test_truth_estimator_degenerate_report():
    sc = get_scenario("quadratic-normal", n=100)
    rep = run_mc(sc, {"truth": TruthEstimator()}, reps=5, seed=1)["truth"]
    row = rep.row("beta2")
    assert row["SD"] == 0 and row["RMSE"] == 0 and row["Mean"] == 0.5
    assert np.isnan(row["Coverage"]) and np.isnan(row["SE/SD"])


def test_report_identities_and_determinism():
    sc = get_scenario("quadratic-normal", n=300)
    est = {"2SSEM": TwoStageEstimator(), "2SLS": IVEstimator(robust=False)}
    a = run_mc(sc, est, reps=6, seed=9)
    b = run_mc(sc, est, reps=6, seed=9, threads=3)
    assert reports_to_csv(a) == reports_to_csv(b)
    for rep in a.values():
        t = rep.table
        lhs = t["RMSE"] ** 2
        rhs = t["SD"] ** 2 + (t["Mean"] - t["truth"]) ** 2
        np.testing.assert_allclose(lhs, rhs, rtol=1e-10)
        assert t["Coverage"].between(0, 1).all()
    c = run_mc(sc, est, reps=6, seed=10)
    assert reports_to_csv(c) != reports_to_csv(a)


def test_csv_round_trip():
    sc = get_scenario("quadratic-normal", n=200)
    reps = run_mc(sc, {"2SLS robust": IVEstimator()}, reps=4, seed=2)
    text = reports_to_csv(reps)
    assert text.splitlines()[-1].startswith("# estimator=2SLS robust; scenario=quadratic-normal-n200")
    back = reports_from_csv(text)
    orig = reps["2SLS robust"]
    got = back["2SLS robust"]
    assert (got.reps, got.failures, got.scenario) == (orig.reps, orig.failures, orig.scenario)
    assert got.table.equals(orig.table)


class Flaky:
    def __call__(self, data, scenario):
        # fails on replications whose first z draw is negative
        if data["z"].iloc[0] < 0:
            raise SemError("boom")
        return {"beta1": (1.0, 0.1), "beta2": (0.5, 0.1)}


def test_failures_excluded_and_counted():
    sc = get_scenario("quadratic-normal", n=50)
    rep = run_mc(sc, {"f": Flaky()}, reps=20, seed=3)["f"]
    assert 0 < rep.failures < 20
    assert rep.reps == 20 and len(rep.estimates) == 20 - rep.failures
    assert f"failures={rep.failures}" in rep.footer()

    def always(data, scenario):
        raise SemError("no")

    with pytest.raises(SemError, match="all 3 replications failed"):
        run_mc(sc, {"x": always}, reps=3)
    with pytest.raises(SpecError):
        run_mc(sc, {"x": always}, reps=1)


def test_iv_not_defined_for_exponential():
    sc = get_scenario("exponential", n=100)
    with pytest.raises(SpecError):
        IVEstimator()(generate(sc), sc)
