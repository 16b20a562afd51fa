"""Property-based checks of the closed forms and serializers."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from twostagesem import SemSpec, quadrature_oracle
from twostagesem.predict import (predict_piecewise, predict_polynomial, predict_spline,
                                 spline_evaluate, upper_partial_moment)

means = st.floats(-4, 4)
sds = st.floats(0.05, 3)


@given(means, sds, st.integers(1, 5))
@settings(max_examples=60, deadline=None)
def test_polynomial_moments(m, s, degree):
    got = predict_polynomial(m, s * s, degree)
    for j in range(degree):
        ref = quadrature_oracle(lambda x: x ** (j + 1), m, s * s)
        assert abs(got[j] - ref) <= 1e-9 * max(1.0, abs(ref))


@given(means, sds, st.floats(-5, 5))
@settings(max_examples=80, deadline=None)
def test_partial_moment_relations(m, s, t):
    assert abs(upper_partial_moment(m, s, t, 0) - stats.norm.sf(t, m, s)) < 1e-15
    for k in range(4):
        assert upper_partial_moment(m, s, t, k) >= 0
    # E[(xi - t)^+] is decreasing in t
    assert upper_partial_moment(m, s, t + 0.1, 1) <= upper_partial_moment(m, s, t, 1) + 1e-15


@given(means, sds, st.floats(-3, 3))
@settings(max_examples=80, deadline=None)
def test_piecewise_decomposition(m, s, tau):
    below, above = predict_piecewise(m, s, tau)
    p = upper_partial_moment(m, s, tau, 0)
    assert abs(below + tau * p + above - m) < 1e-12 * max(1, abs(m), abs(tau))


@given(st.lists(st.floats(-3, 3), min_size=3, max_size=7, unique=True), means)
@settings(max_examples=50, deadline=None)
def test_spline_point_mass_limit(knots, m):
    knots = np.sort(knots)
    if np.min(np.diff(knots)) < 1e-3:
        return
    got = predict_spline(np.array([m]), 0.0, knots)[0]
    np.testing.assert_allclose(got, spline_evaluate(np.array([m]), knots)[0], rtol=1e-12, atol=1e-12)


@given(st.integers(2, 5), st.integers(1, 3), st.booleans())
@settings(max_examples=30, deadline=None)
def test_spec_yaml_round_trip(n_ind, n_lat, cov):
    meas = {f"f{l}": [f"x{l}_{j}" for j in range(n_ind)] for l in range(n_lat)}
    spec = SemSpec.factor_model(meas, latent_covariances=cov)
    back = SemSpec.loads(spec.dumps())
    assert back == spec
    lay = spec.layout
    theta = np.linspace(0.1, 2.0, len(lay))
    np.testing.assert_allclose(lay.from_unconstrained(lay.to_unconstrained(theta)), theta)
