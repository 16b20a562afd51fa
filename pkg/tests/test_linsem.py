import numpy as np
import pandas as pd
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from twostagesem import (DataError, LinearSEM, NumericalError, SemSpec, SpecError, fit_ml,
                         implied_moments, loglik, score)
from twostagesem.linsem import latent_posterior
from twostagesem.model import build_matrices

from conftest import simulate_two_factor


def random_theta(spec, rng):
    """Admissible parameters: moderate loadings / paths, variances in [0.5, 2]."""
    lay = spec.layout
    theta = rng.uniform(-0.8, 0.8, len(lay))
    theta[lay.is_variance] = rng.uniform(0.5, 2.0, lay.is_variance.sum())
    for k, kind in enumerate(lay.kinds):
        if kind == "Lambda":
            theta[k] = rng.uniform(0.5, 1.5)
    return theta


def fd_gradient(f, x, h=1e-5):
    g = np.empty_like(x)
    for j in range(len(x)):
        step = h * max(1.0, abs(x[j]))
        e = np.zeros_like(x)
        e[j] = step
        g[j] = (f(x + e) - f(x - e)) / (2 * step)
    return g


def test_implied_moments_closed_form(two_factor_spec):
    rng = np.random.default_rng(1)
    theta = random_theta(two_factor_spec, rng)
    M = build_matrices(two_factor_spec, theta)
    z = np.array([[0.7]])
    A = np.linalg.inv(np.eye(2) - M.B)
    mu = M.nu + M.Lambda @ A @ (M.alpha + M.Gamma @ z[0]) + M.K @ z[0]
    Sigma = M.Lambda @ A @ M.Psi @ A.T @ M.Lambda.T + M.Omega
    im = implied_moments(two_factor_spec, theta, z)
    np.testing.assert_allclose(im.mean[0], mu, rtol=1e-13)
    np.testing.assert_allclose(im.cov, Sigma, rtol=1e-13)


def test_loglik_matches_scipy(two_factor_spec, two_factor_data):
    from scipy import stats

    theta = random_theta(two_factor_spec, np.random.default_rng(2))
    im = implied_moments(two_factor_spec, theta, two_factor_data[["z"]].to_numpy())
    Y = two_factor_data[list(two_factor_spec.observed)].to_numpy()
    ref = sum(stats.multivariate_normal(im.mean[i], im.cov).logpdf(Y[i]) for i in range(len(Y)))
    assert loglik(two_factor_spec, theta, two_factor_data) == pytest.approx(ref, rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_score_matches_finite_differences(two_factor_spec, two_factor_data, seed):
    theta = random_theta(two_factor_spec, np.random.default_rng(100 + seed))
    g = score(two_factor_spec, theta, two_factor_data).sum(0)
    fd = fd_gradient(lambda t: loglik(two_factor_spec, t, two_factor_data), theta)
    rel = np.abs(g - fd) / np.maximum(np.abs(g), 1.0)
    assert rel.max() < 1e-6


def test_saturated_model_reproduces_sample_moments():
    # one factor, three indicators: just identified, so the ML fit is the sample moments
    rng = np.random.default_rng(3)
    xi = rng.normal(size=800)
    d = pd.DataFrame({f"x{j}": 0.2 * j + (1 + 0.3 * j) * xi + rng.normal(size=800) for j in (1, 2, 3)})
    spec = SemSpec.factor_model({"f": ["x1", "x2", "x3"]})
    fit = fit_ml(spec, d)
    assert fit.converged
    im = implied_moments(spec, fit.theta_hat)
    np.testing.assert_allclose(np.ravel(im.mean), d.mean().to_numpy(), atol=1e-9)
    np.testing.assert_allclose(im.cov, np.cov(d.to_numpy().T, ddof=0), atol=1e-8)


def test_fit_recovers_truth_and_scores_vanish(two_factor_spec):
    d = simulate_two_factor(5000, np.random.default_rng(9))
    fit = fit_ml(two_factor_spec, d)
    assert fit.converged
    assert np.abs(fit.score_matrix.mean(0)).max() < 1e-6
    est = fit.theta_hat
    truth = {"f2~f1": 0.8, "f1~z": 0.5, "a2~z": 0.4, "a2~f1": 0.9, "b3~f2": 1.2,
             "f2~~f2": 0.49, "a1~~a1": 0.36}
    for lab, val in truth.items():
        se = fit.se[fit.spec.layout.index[lab]]
        assert abs(est[lab] - val) < 4 * se, lab
    assert np.all(np.diff(fit.loglik_trace) >= -1e-9 * abs(fit.loglik))


def test_influence_reproduces_vcov(two_factor_spec, two_factor_data):
    fit = fit_ml(two_factor_spec, two_factor_data)
    n = fit.n_obs
    # the sandwich from influence functions estimates the same matrix as inv(info) / n
    sand = fit.influence.T @ fit.influence / n**2
    np.testing.assert_allclose(np.diag(sand), np.diag(fit.vcov), rtol=0.35)
    np.testing.assert_allclose(fit.vcov, np.linalg.inv(fit.information) / n, rtol=1e-10)


def test_bfgs_agrees_with_fisher(two_factor_spec, two_factor_data):
    a = fit_ml(two_factor_spec, two_factor_data, compute_inference=False)
    b = fit_ml(two_factor_spec, two_factor_data, method="bfgs", compute_inference=False)
    assert b.loglik == pytest.approx(a.loglik, abs=1e-6)
    np.testing.assert_allclose(b.theta_hat.values, a.theta_hat.values, atol=1e-4)


def test_restart_at_optimum_takes_no_steps(two_factor_spec, two_factor_data):
    a = fit_ml(two_factor_spec, two_factor_data, compute_inference=False)
    b = fit_ml(two_factor_spec, two_factor_data, start=a.theta_hat.values, compute_inference=False)
    assert b.iterations == 0 and b.converged


def test_latent_posterior_calibrated():
    rng = np.random.default_rng(4)
    n = 20000
    xi = rng.normal(size=n)
    d = pd.DataFrame({f"x{j}": xi + rng.normal(size=n) for j in (1, 2, 3)})
    spec = SemSpec.factor_model({"f": ["x1", "x2", "x3"]})
    theta = {"x2~f": 1, "x3~f": 1, "x2": 0, "x3": 0, "f": 0,
             "x1~~x1": 1, "x2~~x2": 1, "x3~~x3": 1, "f~~f": 1}
    m, v = latent_posterior(spec, spec.param_vector(theta).values, d.to_numpy(), np.zeros((n, 0)))
    np.testing.assert_allclose(m[:, 0], d.mean(1) * 0.75, atol=1e-12)
    assert v[0, 0] == pytest.approx(0.25)
    assert np.mean((xi - m[:, 0]) ** 2) == pytest.approx(0.25, rel=0.03)


def test_missing_values_policy(two_factor_spec, two_factor_data):
    d = two_factor_data.copy()
    d.loc[[3, 7], "a1"] = np.nan
    with pytest.raises(DataError, match=r"2 row\(s\).*\[3, 7\]"):
        fit_ml(two_factor_spec, d)
    fit = fit_ml(two_factor_spec, d, missing="drop", compute_inference=False)
    assert fit.n_obs == len(d) - 2
    with pytest.raises(DataError, match="missing required columns"):
        fit_ml(two_factor_spec, d.drop(columns="b2"))


def test_non_pd_raises(two_factor_spec, two_factor_data):
    theta = random_theta(two_factor_spec, np.random.default_rng(0))
    theta[two_factor_spec.layout.is_variance] = -1.0
    with pytest.raises(NumericalError):
        loglik(two_factor_spec, theta, two_factor_data)


def test_too_few_rows(two_factor_spec, two_factor_data):
    with pytest.raises(SpecError, match="more observations"):
        fit_ml(two_factor_spec, two_factor_data.iloc[:10])


def test_estimator_api(two_factor_spec, two_factor_data):
    est = LinearSEM(two_factor_spec, tol=1e-7)
    assert clone(est).get_params()["tol"] == 1e-7
    with pytest.raises(NotFittedError):
        est.transform(two_factor_data)
    scores = est.fit_transform(two_factor_data)
    assert scores.shape == (len(two_factor_data), 2)
    assert est.score(two_factor_data) == pytest.approx(est.result_.loglik / len(two_factor_data))
    assert set(est.params_) == set(two_factor_spec.layout.labels)
    with pytest.raises(SpecError):
        LinearSEM().fit(two_factor_data)
