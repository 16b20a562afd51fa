"""Conditional expectations of non-linear latent terms.

Under a linear Gaussian stage-1 model the latents given the indicators and
covariates are normal with mean ``m`` (one row per observation) and a
covariance ``v`` that is the same for every row.  The functions here map
``(m, v)`` to ``E[phi(xi) | X, Z]`` in closed form for the supported
families, and provide a quadrature oracle used to check them.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from math import comb, factorial
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy import integrate, special

from ._validation import as_frame
from .exceptions import ConvergenceError, NumericalError, SpecError

SQRT2PI = np.sqrt(2.0 * np.pi)
_TAIL = 8.0
_EXP_LIMIT = 700.0


class ConditionalMoments(NamedTuple):
    """Normal law of the latents given ``(X, Z)``.

    Attributes
    ----------
    m : ndarray, shape (n, q)
    v : ndarray, shape (q, q)
        Shared by all rows.
    latents : tuple of str
    """

    m: np.ndarray
    v: np.ndarray
    latents: tuple

    @property
    def s(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.v), 0.0, None))

    def column(self, latent: str | None):
        """``(m, v, s)`` for a single latent (the first when ``latent`` is None)."""
        k = 0 if latent is None else self._index(latent)
        v = float(self.v[k, k])
        return self.m[:, k], v, np.sqrt(max(v, 0.0))

    def _index(self, latent):
        try:
            return self.latents.index(latent)
        except ValueError:
            raise SpecError(f"unknown latent {latent!r}; have {list(self.latents)}") from None


def conditional_moments(stage1_fit, data, missing: str = "raise") -> ConditionalMoments:
    """Conditional mean and variance of the stage-1 latents.

    ``m = A(alpha + Gamma z) + C Lambda' Sigma_X^-1 (x - mu_X)`` and
    ``v = C - C Lambda' Sigma_X^-1 Lambda C`` where ``A = (I - B)^-1`` and
    ``C = A Psi A'``; with ``B = 0`` these are the usual normal
    conditioning formulas with ``Sigma_Xxi = Psi Lambda'``.

    Parameters
    ----------
    stage1_fit : FitResult
    data : DataFrame or mapping
    """
    from .linsem import extract, latent_posterior

    spec = stage1_fit.spec
    Y, Z = extract(spec, data, missing=missing)
    m, v = latent_posterior(spec, stage1_fit.theta_hat, Y, Z)
    return ConditionalMoments(m, v, spec.latents)


# ------------------------------------------------------------- closed forms
def _check_v(v):
    if np.any(np.asarray(v) < 0):
        raise NumericalError("conditional variance must be non-negative")


def predict_polynomial(m, v, degree: int) -> np.ndarray:
    """Raw moments ``E[xi^j]``, ``j = 1..degree``, of ``N(m, v)``.

    Returns an array of shape ``m.shape + (degree,)``.

    Examples
    --------
    >>> predict_polynomial(1.0, 1.0, 4)[-1]
    10.0
    """
    if int(degree) != degree or degree < 1:
        raise SpecError("polynomial degree must be an integer >= 1")
    _check_v(v)
    m = np.asarray(m, dtype=float)
    out = np.empty(m.shape + (int(degree),))
    for j in range(1, int(degree) + 1):
        acc = np.zeros_like(m)
        for k in range(j // 2 + 1):
            c = factorial(j) / (2**k * factorial(k) * factorial(j - 2 * k))
            acc = acc + c * m ** (j - 2 * k) * np.asarray(v, dtype=float) ** k
        out[..., j - 1] = acc
    return out


def predict_exponential(m, v, power: float = 1.0) -> np.ndarray:
    """``E[exp(power * xi)]`` for ``xi ~ N(m, v)``."""
    _check_v(v)
    expo = 0.5 * power**2 * np.asarray(v, dtype=float) + power * np.asarray(m, dtype=float)
    if np.any(expo > _EXP_LIMIT):
        raise NumericalError("exponential prediction overflows (exponent > 700)")
    return np.exp(expo)


def _mills(c):
    # Q(c) / phi(c), accurate for large positive c
    return special.erfcx(c / np.sqrt(2.0)) * np.sqrt(np.pi / 2.0)


def upper_partial_moment(m, s, t, k: int) -> np.ndarray:
    """``E[(xi - t)^k 1{xi > t}]`` for ``xi ~ N(m, s^2)``, ``k = 0..3``.

    With ``c = (t - m)/s`` and ``u`` standard normal the value is
    ``s^k E[(u - c)^k 1{u > c}]``.  Deep in the upper tail (``c > 8``) the
    terms are rewritten through the Mills ratio so the small result is not
    lost to cancellation.
    """
    if k not in (0, 1, 2, 3):
        raise ValueError("k must be 0, 1, 2 or 3")
    m = np.asarray(m, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(s < 0):
        raise NumericalError("conditional standard deviation must be non-negative")
    with np.errstate(divide="ignore", invalid="ignore"):
        c = (t - m) / s
    c_safe = np.where(np.isfinite(c), c, 0.0)
    pdf = np.exp(-0.5 * c_safe**2) / SQRT2PI
    Q = special.ndtr(-c_safe)
    # I_j = E[u^j 1{u > c}]
    I = [Q, pdf, c_safe * pdf + Q, (c_safe**2 + 2.0) * pdf]
    direct = sum(comb(k, j) * (-c_safe) ** (k - j) * I[j] for j in range(k + 1))
    R = _mills(np.maximum(c_safe, _TAIL))
    cc = np.maximum(c_safe, _TAIL)
    tail = pdf * {
        0: R,
        1: 1.0 - cc * R,
        2: (1.0 + cc**2) * R - cc,
        3: cc**2 + 2.0 - cc * (cc**2 + 3.0) * R,
    }[k]
    val = np.where(c_safe > _TAIL, tail, direct)
    val = np.clip(val, 0.0, None) * s**k
    # s == 0: point mass at m
    point = np.where(m > t, (m - t) ** k, 0.0)
    return np.where(s > 0, val, point)


def predict_piecewise(m, s, tau: float):
    """``(E[xi 1{xi < tau}], E[(xi - tau) 1{xi > tau}])`` for ``xi ~ N(m, s^2)``."""
    m = np.asarray(m, dtype=float)
    above = upper_partial_moment(m, s, tau, 1)
    # xi 1{xi<tau} = xi - tau 1{xi>tau} - (xi - tau) 1{xi>tau}
    p_above = upper_partial_moment(m, s, tau, 0)
    below = m - tau * p_above - above
    return below, above


def spline_basis_coefficients(knots) -> np.ndarray:
    """Matrix ``D`` (k-2, k) with ``f_j = sum_l D[j, l] g_l``."""
    t = _check_knots(knots)
    k = len(t)
    D = np.zeros((k - 2, k))
    span = t[-1] - t[-2]
    for j in range(k - 2):
        D[j, j] = 1.0
        D[j, k - 2] = -(t[-1] - t[j]) / span
        D[j, k - 1] = (t[-2] - t[j]) / span
    return D


def _check_knots(knots):
    t = np.asarray(knots, dtype=float)
    if t.ndim != 1 or len(t) < 3:
        raise SpecError("natural spline needs at least 3 knots")
    if not np.all(np.diff(t) > 0):
        raise SpecError("spline knots must be strictly increasing")
    return t


def predict_truncated_cubic(m, s, t) -> np.ndarray:
    """``E[g(xi)] = E[(xi - t)^3 1{xi > t}]``."""
    return upper_partial_moment(m, s, t, 3)


def predict_spline(m, s, knots) -> np.ndarray:
    """Columns ``[E xi, E f_1(xi), ..., E f_{k-2}(xi)]`` of the natural cubic spline basis."""
    t = _check_knots(knots)
    m = np.asarray(m, dtype=float)
    G = np.stack([predict_truncated_cubic(m, s, tj) for tj in t], axis=-1)
    F = G @ spline_basis_coefficients(t).T
    return np.concatenate([m[..., None], F], axis=-1)


def spline_evaluate(xi, knots) -> np.ndarray:
    t = _check_knots(knots)
    xi = np.asarray(xi, dtype=float)
    G = np.clip(xi[..., None] - t, 0.0, None) ** 3
    return np.concatenate([xi[..., None], G @ spline_basis_coefficients(t).T], axis=-1)


def predict_interaction(m, v, pair=(0, 1)) -> np.ndarray:
    """``E[xi_a xi_b] = Cov(xi_a, xi_b) + E xi_a E xi_b`` row-wise."""
    a, b = pair
    m = np.atleast_2d(np.asarray(m, dtype=float))
    v = np.asarray(v, dtype=float)
    return m[:, a] * m[:, b] + v[a, b]


# ------------------------------------------------------------------- bases
class NonlinearBasis:
    """A finite family ``phi = (phi_1, ..., phi_l)`` of functions of the latents.

    Subclasses implement :meth:`expect`, returning ``E[phi(xi) | X, Z]`` as
    an ``(n, l)`` array, and :meth:`evaluate`, returning ``phi`` at known
    latent values.
    """

    latent: str | None = None

    @property
    def n_terms(self) -> int:
        raise NotImplementedError

    def names(self, latents: Sequence[str]) -> list[str]:
        lat = self.latent or latents[0]
        return [f"{lat}_{j + 1}" for j in range(self.n_terms)]

    def prepare(self, moments: ConditionalMoments) -> "NonlinearBasis":
        """Resolve data-dependent settings (such as default knots)."""
        return self

    def expect(self, moments: ConditionalMoments, data=None) -> np.ndarray:
        raise NotImplementedError

    def evaluate(self, xi) -> np.ndarray:
        raise NotImplementedError

    def breakpoints(self) -> tuple:
        """Non-smooth points of ``phi`` (used by the quadrature oracle)."""
        return ()


@dataclass(frozen=True)
class Linear(NonlinearBasis):
    latent: str | None = None

    @property
    def n_terms(self):
        return 1

    def expect(self, moments, data=None):
        return moments.column(self.latent)[0][:, None]

    def evaluate(self, xi):
        return np.asarray(xi, dtype=float)[..., None]


@dataclass(frozen=True)
class Polynomial(NonlinearBasis):
    degree: int = 2
    latent: str | None = None

    def __post_init__(self):
        if int(self.degree) != self.degree or self.degree < 1:
            raise SpecError("polynomial degree must be an integer >= 1")

    @property
    def n_terms(self):
        return int(self.degree)

    def expect(self, moments, data=None):
        m, v, _ = moments.column(self.latent)
        return predict_polynomial(m, v, self.degree)

    def evaluate(self, xi):
        xi = np.asarray(xi, dtype=float)
        return np.stack([xi**j for j in range(1, self.n_terms + 1)], axis=-1)


@dataclass(frozen=True)
class Exponential(NonlinearBasis):
    """Columns ``[xi, exp(power * xi)]`` (or only the exponential term)."""

    power: float = 1.0
    include_linear: bool = True
    latent: str | None = None

    @property
    def n_terms(self):
        return 2 if self.include_linear else 1

    def expect(self, moments, data=None):
        m, v, _ = moments.column(self.latent)
        e = predict_exponential(m, v, self.power)[:, None]
        return np.hstack([m[:, None], e]) if self.include_linear else e

    def evaluate(self, xi):
        xi = np.asarray(xi, dtype=float)
        e = np.exp(self.power * xi)[..., None]
        return np.concatenate([xi[..., None], e], axis=-1) if self.include_linear else e


@dataclass(frozen=True)
class PiecewiseLinear(NonlinearBasis):
    """Columns ``[xi 1{xi<tau} + tau 1{xi>tau}, (xi - tau) 1{xi>tau}]``, continuous at ``tau``."""

    tau: float = 0.0
    latent: str | None = None

    @property
    def n_terms(self):
        return 2

    def expect(self, moments, data=None):
        m, _, s = moments.column(self.latent)
        below, above = predict_piecewise(m, s, self.tau)
        p_above = upper_partial_moment(m, s, self.tau, 0)
        return np.column_stack([below + self.tau * p_above, above])

    def evaluate(self, xi):
        xi = np.asarray(xi, dtype=float)
        return np.stack([np.minimum(xi, self.tau), np.maximum(xi - self.tau, 0.0)], axis=-1)

    def breakpoints(self):
        return (self.tau,)


@dataclass(frozen=True)
class NaturalSpline(NonlinearBasis):
    """Natural cubic spline with columns ``[xi, f_1, ..., f_{k-2}]`` (``df = k - 1``).

    Parameters
    ----------
    knots : sequence of float, optional
        Strictly increasing, at least 3.  When omitted, ``n_knots``
        equidistant knots over the range of the predicted conditional means
        are chosen by :meth:`prepare`.
    """

    knots: tuple | None = None
    n_knots: int = 5
    latent: str | None = None

    def __post_init__(self):
        if self.knots is not None:
            object.__setattr__(self, "knots", tuple(float(t) for t in _check_knots(self.knots)))
        elif self.n_knots < 3:
            raise SpecError("natural spline needs at least 3 knots")

    @classmethod
    def from_df(cls, df: int, latent=None) -> "NaturalSpline":
        return cls(knots=None, n_knots=int(df) + 1, latent=latent)

    @property
    def n_terms(self):
        return (len(self.knots) if self.knots is not None else self.n_knots) - 1

    def prepare(self, moments):
        if self.knots is not None:
            return self
        m = moments.column(self.latent)[0]
        lo, hi = float(np.min(m)), float(np.max(m))
        if not hi > lo:
            raise NumericalError("cannot place spline knots: predicted means are constant")
        return NaturalSpline(tuple(np.linspace(lo, hi, self.n_knots)), self.n_knots, self.latent)

    def _knots(self):
        if self.knots is None:
            raise SpecError("spline knots unresolved; call prepare() or pass knots")
        return self.knots

    def expect(self, moments, data=None):
        m, _, s = moments.column(self.latent)
        return predict_spline(m, s, self._knots())

    def evaluate(self, xi):
        return spline_evaluate(xi, self._knots())

    def breakpoints(self):
        return self._knots()


@dataclass(frozen=True)
class ProductInteraction(NonlinearBasis):
    """Columns ``[xi_a, xi_b, xi_a xi_b]`` for a pair of latents."""

    pair: tuple = ()

    def __post_init__(self):
        if len(self.pair) != 2:
            raise SpecError("interaction needs exactly two latents")

    @property
    def n_terms(self):
        return 3

    def names(self, latents):
        a, b = self.pair
        return [a, b, f"{a}:{b}"]

    def expect(self, moments, data=None):
        ia, ib = (moments._index(p) for p in self.pair)
        return np.column_stack([moments.m[:, ia], moments.m[:, ib],
                                predict_interaction(moments.m, moments.v, (ia, ib))])

    def evaluate(self, xi):
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        return np.column_stack([xi[:, 0], xi[:, 1], xi[:, 0] * xi[:, 1]])


@dataclass(frozen=True)
class Custom(NonlinearBasis):
    """User-supplied prediction ``fn(m, v, data) -> (n, l)``.

    ``m`` is the ``(n, q)`` matrix of conditional means, ``v`` the ``(q, q)``
    conditional covariance and ``data`` the complete-case rows as a
    DataFrame, so predictions may depend on covariates.  ``curve`` is an
    optional ``phi(xi)`` used by curve plotting.
    """

    fn: Callable = None
    labels: tuple = ()
    curve: Callable | None = field(default=None, compare=False)

    def __post_init__(self):
        if not callable(self.fn):
            raise SpecError("Custom basis needs a callable fn(m, v, data)")
        if not self.labels:
            raise SpecError("Custom basis needs column labels")
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def n_terms(self):
        return len(self.labels)

    def names(self, latents):
        return list(self.labels)

    def expect(self, moments, data=None):
        out = np.asarray(self.fn(moments.m, moments.v, data), dtype=float)
        out = out.reshape(len(moments.m), -1)
        if out.shape[1] != self.n_terms:
            raise SpecError(f"custom basis returned {out.shape[1]} columns, expected {self.n_terms}")
        return out

    def evaluate(self, xi):
        if self.curve is None:
            raise SpecError("Custom basis has no curve function")
        return np.asarray(self.curve(xi), dtype=float).reshape(len(np.atleast_1d(xi)), -1)


def make_basis(kind: str, **options) -> NonlinearBasis:
    """Construct a basis from a short name (used by the CLI).

    ``kind`` is one of ``linear``, ``quadratic``, ``cubic``, ``polynomial``
    (``degree``), ``exponential`` (``power``), ``piecewise`` (``tau``),
    ``spline`` (``knots`` or ``df``) and ``interaction`` (``pair``).
    """
    kind = kind.lower()
    latent = options.get("latent")
    if kind == "linear":
        return Linear(latent)
    if kind == "quadratic":
        return Polynomial(2, latent)
    if kind == "cubic":
        return Polynomial(3, latent)
    if kind == "polynomial":
        return Polynomial(int(options.get("degree") or 2), latent)
    if kind == "exponential":
        return Exponential(float(options.get("power") or 1.0), latent=latent)
    if kind == "piecewise":
        if options.get("tau") is None:
            raise SpecError("piecewise basis needs a breakpoint")
        return PiecewiseLinear(float(options["tau"]), latent)
    if kind == "spline":
        if options.get("knots"):
            return NaturalSpline(tuple(options["knots"]), latent=latent)
        return NaturalSpline.from_df(int(options.get("df") or 4), latent)
    if kind == "interaction":
        return ProductInteraction(tuple(options["pair"]))
    raise SpecError(f"unknown basis type {kind!r}")


@dataclass(frozen=True)
class PredictionMatrix:
    values: np.ndarray
    labels: tuple

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise NumericalError("non-finite predictions")


def predict(stage1_fit, basis: NonlinearBasis, data, missing="raise") -> PredictionMatrix:
    """Predictions ``E[phi(xi) | X, Z]`` for a Gaussian or mixture stage-1 fit."""
    if hasattr(stage1_fit, "posterior"):
        return predict_mixture(stage1_fit, basis, data, missing=missing)
    mom = conditional_moments(stage1_fit, data, missing=missing)
    basis = basis.prepare(mom)
    frame = as_frame(data)
    return PredictionMatrix(basis.expect(mom, frame), tuple(basis.names(mom.latents)))


def predict_mixture(mixture_fit, basis: NonlinearBasis, data, missing="raise") -> PredictionMatrix:
    """Posterior-weighted predictions ``sum_k P(G=k | X, Z) E_k[phi(xi) | X, Z]``."""
    comps, post = mixture_fit.component_moments(data, missing=missing)
    frame = as_frame(data)
    # knots etc. are resolved on the pooled conditional means
    pooled = ConditionalMoments(sum(p[:, None] * c.m for p, c in zip(post.T, comps)),
                                comps[0].v, comps[0].latents)
    basis = basis.prepare(pooled)
    values = sum(post[:, [k]] * basis.expect(c, frame) for k, c in enumerate(comps))
    return PredictionMatrix(np.asarray(values), tuple(basis.names(comps[0].latents)))


# --------------------------------------------------------------- quadrature
def quadrature_oracle(f: Callable, m: float, v: float, breakpoints: Sequence[float] = (),
                      tol: float = 1e-12, max_nodes: int = 1280) -> float:
    """Numerical ``E[f(xi)]`` for ``xi ~ N(m, v)``.

    Smooth integrands use Gauss-Hermite rules with the node count doubled
    until successive estimates agree to ``tol`` (absolute).  When ``f`` has
    kinks or jumps at ``breakpoints`` the normal density is integrated
    piecewise with adaptive Gauss-Kronrod on finite segments covering
    ``m +/- 40 sd``.

    Raises
    ------
    ConvergenceError
        When the refinement does not reach ``tol``.
    """
    v = float(v)
    if v < 0:
        raise NumericalError("variance must be non-negative")
    if v == 0:
        return float(f(np.array([float(m)]))[0])
    s = np.sqrt(v)
    if breakpoints:
        grid = m + s * np.arange(-40.0, 41.0, 4.0)
        cuts = np.unique(np.concatenate([grid, [b for b in breakpoints if grid[0] < b < grid[-1]]]))
        dens = lambda x: f(np.array([x]))[0] * np.exp(-0.5 * ((x - m) / s) ** 2) / (s * SQRT2PI)  # noqa: E731
        total, err = 0.0, 0.0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            for a, b in zip(cuts[:-1], cuts[1:]):
                val, e = integrate.quad(dens, a, b, epsabs=1e-14, epsrel=1e-13, limit=200)
                total += val
                err += e
        if err > tol * max(1.0, abs(total)):
            raise ConvergenceError(f"quadrature error estimate {err:.2e} exceeds tolerance")
        return float(total)
    prev = None
    n = 20
    while n <= max_nodes:
        x, w = np.polynomial.hermite.hermgauss(n)
        est = float(w @ f(m + np.sqrt(2.0) * s * x) / np.sqrt(np.pi))
        if prev is not None and abs(est - prev) <= tol * max(1.0, abs(est)):
            return est
        prev = est
        n *= 2
    raise ConvergenceError("Gauss-Hermite refinement did not converge")


def quadrature_oracle_2d(f: Callable, m, v, n_nodes: int = 40) -> float:
    """Tensor Gauss-Hermite ``E[f(xi1, xi2)]`` for a bivariate normal (smooth ``f``)."""
    m = np.asarray(m, dtype=float)
    L = np.linalg.cholesky(np.asarray(v, dtype=float))
    x, w = np.polynomial.hermite.hermgauss(n_nodes)
    X1, X2 = np.meshgrid(x, x, indexing="ij")
    U = np.sqrt(2.0) * np.stack([X1.ravel(), X2.ravel()])
    pts = m[:, None] + L @ U
    W = np.outer(w, w).ravel() / np.pi
    return float(W @ f(pts[0], pts[1]))
