import numpy as np
import pytest
from sklearn.base import clone

from twostagesem import (ConvergenceError, MixtureSEM, SemSpec, SpecError, fit_ml, fit_mixture,
                         generate, get_scenario)
from twostagesem.mixture import _Problem, mixture_influence, mixture_spec


@pytest.fixture(scope="module")
def gmm_data():
    return generate(get_scenario("gmm-n1000"), seed=101)


@pytest.fixture(scope="module")
def gmm_fit(gmm_data, specs):
    return fit_mixture(specs[0], gmm_data, K=2, seed=1)


def test_mixture_spec_dummies(specs):
    aug, labels = mixture_spec(specs[0], 3)
    assert labels == {"xi": ["xi@1", "xi@2", "xi@3"]}
    assert aug.covariates == ("__class1", "__class2", "__class3")
    assert dict(aug.intercepts)["xi"].value == 0.0


def test_k1_reduces_to_ml(quad_data, specs):
    a = fit_mixture(specs[0], quad_data, K=1)
    b = fit_ml(specs[0], quad_data)
    assert a.loglik == b.loglik
    np.testing.assert_array_equal(a.theta1, b.theta_hat.values)
    assert a.aic == pytest.approx(b.aic)


def test_recovers_mixture(gmm_fit, gmm_data, specs):
    f = gmm_fit
    assert f.converged
    assert f.pi_hat[0] == pytest.approx(0.25, abs=0.06)
    se = np.sqrt(np.diag(f.vcov))
    idx = [f.labels.index("xi@1"), f.labels.index("xi@2")]
    assert np.all(np.abs(f.intercepts["xi"] - [0.0, 3.0]) < 4 * se[idx])
    assert np.all(np.diff(f.intercepts["xi"]) > 0)  # canonical order
    assert f.loglik > fit_ml(specs[0], gmm_data, compute_inference=False).loglik
    assert np.abs(f.score_matrix.mean(0)).max() < 1e-5
    assert f.aic == pytest.approx(-2 * f.loglik + 2 * (f.aug_spec.n_free + 1))
    assert np.allclose(f.posterior.sum(1), 1.0)


def test_em_monotone(gmm_fit):
    tr = np.asarray(gmm_fit.loglik_trace)
    assert len(tr) > 5
    assert np.all(np.diff(tr) >= -1e-9 * abs(tr[-1]))


def test_score_matches_finite_differences(gmm_fit, gmm_data, specs):
    prob = _Problem(specs[0], gmm_fit.aug_spec, 2, gmm_data[["x1", "x2", "x3"]].to_numpy(),
                    np.zeros((len(gmm_data), 0)))
    flat = gmm_fit.theta1 + 0.05  # away from the optimum
    g = prob.score(flat).sum(0)
    fd = np.empty_like(flat)
    for j in range(len(flat)):
        h = 1e-5 * max(1, abs(flat[j]))
        e = np.zeros_like(flat)
        e[j] = h
        fd[j] = (prob.loglik(flat + e) - prob.loglik(flat - e)) / (2 * h)
    assert np.max(np.abs(g - fd) / np.maximum(np.abs(g), 1.0)) < 1e-6


def test_influence_mean_zero(gmm_fit):
    infl = mixture_influence(gmm_fit)
    assert infl.shape == (gmm_fit.n_obs, gmm_fit.n_params)
    assert np.abs(infl.mean(0)).max() < 1e-4


def test_with_theta1_round_trip(gmm_fit):
    g = gmm_fit.with_theta1(gmm_fit.theta1)
    np.testing.assert_allclose(g.pi_hat, gmm_fit.pi_hat, rtol=1e-14)
    np.testing.assert_array_equal(g.theta_hat.values, gmm_fit.theta_hat.values)


def test_deterministic(gmm_data, specs):
    a = fit_mixture(specs[0], gmm_data, K=2, seed=5, compute_inference=False)
    b = fit_mixture(specs[0], gmm_data, K=2, seed=5, compute_inference=False)
    assert a.loglik == b.loglik and a.restart_logliks == b.restart_logliks
    assert len(a.restart_logliks) + a.degenerate_restarts == 5


def test_errors(quad_data, specs):
    with pytest.raises(SpecError):
        fit_mixture(specs[0], quad_data, K=0)
    fixed = SemSpec.factor_model({"xi": ["x1", "x2", "x3"]})
    d = fixed.to_dict()
    d["intercepts"]["xi"] = 0.0
    with pytest.raises(SpecError, match="free intercept"):
        mixture_spec(SemSpec.from_dict(d), 2)
    assert issubclass(ConvergenceError, RuntimeError)


def test_estimator_api(gmm_data, specs):
    est = MixtureSEM(specs[0], n_components=2, restarts=2, random_state=3)
    assert clone(est).get_params()["restarts"] == 2
    est.fit(gmm_data)
    proba = est.predict_proba(gmm_data)
    assert proba.shape == (len(gmm_data), 2)
    assert set(np.unique(est.predict(gmm_data))) <= {0, 1}
    assert est.score(gmm_data) == pytest.approx(est.result_.loglik / len(gmm_data))
    assert est.transform(gmm_data).shape == (len(gmm_data), 1)
    assert est.aic_ == est.result_.aic
