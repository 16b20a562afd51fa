import itertools

import mpmath
import numpy as np
import pandas as pd
import pytest

from twostagesem import (Custom, Exponential, Linear, NaturalSpline, NumericalError,
                         PiecewiseLinear, Polynomial, ProductInteraction, SpecError, fit_ml,
                         make_basis, predict, quadrature_oracle)
from twostagesem.predict import (ConditionalMoments, predict_exponential, predict_interaction,
                                 predict_piecewise, predict_polynomial, predict_spline,
                                 quadrature_oracle_2d, spline_basis_coefficients,
                                 spline_evaluate, upper_partial_moment)

GRID = list(itertools.product([-3.0, -1.0, 0.0, 1.0, 3.0], [0.1, 0.5, 1.0, 2.0]))
TOL = 1e-8


def moments(m, s):
    return ConditionalMoments(np.array([[m]]), np.array([[s * s]]), ("xi",))


def check_basis(basis, m, s):
    got = basis.expect(moments(m, s))[0]
    for j in range(basis.n_terms):
        ref = quadrature_oracle(lambda x: basis.evaluate(x)[..., j], m, s * s, basis.breakpoints())
        assert abs(got[j] - ref) < TOL, (basis, m, s, j, got[j], ref)


@pytest.mark.parametrize("m,s", GRID)
def test_polynomial_and_exponential_oracle(m, s):
    check_basis(Polynomial(4), m, s)
    check_basis(Exponential(0.5), m, s)
    check_basis(Exponential(-1.0, include_linear=False), m, s)


@pytest.mark.parametrize("m,s", GRID)
@pytest.mark.parametrize("tau", [-1.0, 0.0, 1.5])
def test_piecewise_oracle(m, s, tau):
    check_basis(PiecewiseLinear(tau), m, s)


@pytest.mark.parametrize("m,s", GRID)
def test_spline_oracle(m, s):
    check_basis(NaturalSpline((-2.0, -0.5, 0.0, 1.0, 2.5)), m, s)


@pytest.mark.parametrize("m,s", GRID)
@pytest.mark.parametrize("k", [0, 1, 2, 3])
def test_partial_moments_oracle(m, s, k):
    for t in (-1.0, 0.5):
        got = upper_partial_moment(m, s, t, k)
        ref = quadrature_oracle(lambda x: np.where(x > t, (x - t) ** k, 0.0), m, s * s, (t,))
        assert abs(got - ref) < TOL


@pytest.mark.parametrize("k", [0, 1, 2, 3])
@pytest.mark.parametrize("c", [9.0, 15.0, 30.0])
def test_partial_moments_deep_tail(k, c):
    # relative accuracy where the direct formula would cancel to zero
    mpmath.mp.dps = 40
    ref = mpmath.quad(lambda u: (u - c) ** k * mpmath.npdf(u), [c, c + 5, mpmath.inf])
    got = upper_partial_moment(0.0, 1.0, c, k)
    assert float(got) == pytest.approx(float(ref), rel=1e-9)


def test_point_mass_limit():
    assert upper_partial_moment(2.0, 0.0, 1.0, 2) == 1.0
    assert upper_partial_moment(0.5, 0.0, 1.0, 1) == 0.0
    np.testing.assert_allclose(predict_polynomial(1.5, 0.0, 3), [1.5, 2.25, 3.375])
    below, above = predict_piecewise(2.0, 0.0, 1.0)
    assert (float(below), float(above)) == (0.0, 1.0)


def test_polynomial_known_values():
    np.testing.assert_allclose(predict_polynomial(1.0, 1.0, 4), [1, 2, 4, 10])
    np.testing.assert_allclose(predict_polynomial(0.0, 2.0, 4), [0, 2, 0, 12])
    assert predict_exponential(0.0, 1.0, 1.0) == pytest.approx(np.exp(0.5))


def test_interaction_oracle():
    m = np.array([0.3, -1.2])
    v = np.array([[0.5, 0.2], [0.2, 0.8]])
    ref = quadrature_oracle_2d(lambda a, b: a * b, m, v)
    assert predict_interaction(m[None, :], v, (0, 1))[0] == pytest.approx(ref, abs=1e-12)
    basis = ProductInteraction(("a", "b"))
    out = basis.expect(ConditionalMoments(m[None, :], v, ("a", "b")))
    np.testing.assert_allclose(out[0], [0.3, -1.2, 0.2 + 0.3 * -1.2])
    assert basis.names(("a", "b")) == ["a", "b", "a:b"]


def test_spline_is_natural():
    knots = np.array([-1.0, 0.0, 0.7, 2.0])
    x = np.array([2.5, 3.0, 3.5, 4.0])
    F = spline_evaluate(x, knots)
    # linear beyond the last knot: second differences vanish
    np.testing.assert_allclose(np.diff(F, 2, axis=0), 0.0, atol=1e-10)
    D = spline_basis_coefficients(knots)
    assert D.shape == (2, 4)
    # below the first knot every f_j is zero
    np.testing.assert_array_equal(spline_evaluate(np.array([-3.0]), knots)[0, 1:], 0.0)
    assert predict_spline(np.array([0.2]), 0.0, knots)[0] == pytest.approx(
        spline_evaluate(np.array([0.2]), knots)[0])


def test_spline_knot_placement():
    mom = ConditionalMoments(np.linspace(-2, 3, 50)[:, None], np.array([[0.3]]), ("xi",))
    basis = NaturalSpline.from_df(3).prepare(mom)
    assert basis.knots == pytest.approx((-2.0, -1/3, 4/3, 3.0))
    assert basis.n_terms == 3
    with pytest.raises(SpecError, match="unresolved"):
        NaturalSpline.from_df(3).expect(mom)
    with pytest.raises(SpecError, match="increasing"):
        NaturalSpline((0.0, 0.0, 1.0))


def test_errors():
    with pytest.raises(NumericalError):
        predict_polynomial(0.0, -1.0, 2)
    with pytest.raises(NumericalError, match="overflow"):
        predict_exponential(800.0, 1.0)
    with pytest.raises(SpecError):
        Polynomial(0)
    with pytest.raises(SpecError, match="breakpoint"):
        make_basis("piecewise")
    with pytest.raises(SpecError, match="unknown basis"):
        make_basis("wavelet")


@pytest.mark.parametrize("kind, cls, n", [
    ("linear", Linear, 1), ("quadratic", Polynomial, 2), ("cubic", Polynomial, 3),
    ("exponential", Exponential, 2), ("spline", NaturalSpline, 4),
])
def test_make_basis(kind, cls, n):
    b = make_basis(kind)
    assert isinstance(b, cls) and b.n_terms == n


def test_predict_end_to_end(quad_data, specs):
    s1, _ = specs
    fit = fit_ml(s1, quad_data)
    pm = predict(fit, Polynomial(2), quad_data)
    assert pm.labels == ("xi_1", "xi_2")
    from twostagesem.linsem import latent_posterior

    m, v = latent_posterior(s1, fit.theta_hat, quad_data[["x1", "x2", "x3"]].to_numpy(),
                            np.zeros((len(quad_data), 0)))
    np.testing.assert_allclose(pm.values[:, 1], m[:, 0] ** 2 + v[0, 0])


def test_custom_basis_uses_covariates(quad_cov_data, specs_cov):
    s1, _ = specs_cov
    fit = fit_ml(s1, quad_cov_data)
    fn = lambda m, v, data: m[:, 0] * data["z"].to_numpy()  # noqa: E731
    pm = predict(fit, Custom(fn, ("xi_z",)), quad_cov_data)
    base = predict(fit, Linear(), quad_cov_data).values[:, 0]
    np.testing.assert_allclose(pm.values[:, 0], base * quad_cov_data["z"])
    with pytest.raises(SpecError, match="columns"):
        predict(fit, Custom(fn, ("a", "b")), quad_cov_data)


def test_quadrature_oracle_self_checks():
    assert quadrature_oracle(lambda x: x**2, 1.0, 4.0) == pytest.approx(5.0, abs=1e-12)
    assert quadrature_oracle(lambda x: (x > 0).astype(float), 0.0, 1.0, (0.0,)) == pytest.approx(0.5)
    assert quadrature_oracle(lambda x: x, 2.0, 0.0) == 2.0
