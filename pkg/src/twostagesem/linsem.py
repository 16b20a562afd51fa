"""Maximum likelihood for conditional-Gaussian linear SEMs.

Given covariates ``z``, the indicators are normal with

    mu(z)  = nu + Lambda A (alpha + Gamma z) + K z,      A = (I - B)^-1
    Sigma  = Lambda A Psi A' Lambda' + Omega

The per-observation score is analytic; the observed information is a
central finite difference of the summed analytic score.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize
from sklearn.base import BaseEstimator

from ._validation import check_columns, check_is_fitted
from .exceptions import ConvergenceError, NumericalError, SpecError
from .model import Matrices, ParamVector, SemSpec, build_matrices

LOG2PI = np.log(2.0 * np.pi)


class ImpliedMoments(NamedTuple):
    mean: np.ndarray
    cov: np.ndarray


class _State(NamedTuple):
    mats: Matrices
    A: np.ndarray
    lat_input: np.ndarray  # alpha + Gamma z, (n, q)
    M: np.ndarray  # latent means A (alpha + Gamma z), (n, q)
    C: np.ndarray  # latent covariance A Psi A'
    mu: np.ndarray
    Sigma: np.ndarray


def _state(spec: SemSpec, theta, Z: np.ndarray) -> _State:
    mats = build_matrices(spec, theta)
    q = len(spec.latents)
    try:
        A = np.linalg.inv(np.eye(q) - mats.B)
    except np.linalg.LinAlgError:
        raise NumericalError("(I - B) is singular") from None
    lat_input = mats.alpha[None, :] + Z @ mats.Gamma.T
    M = lat_input @ A.T
    mu = mats.nu[None, :] + M @ mats.Lambda.T + Z @ mats.K.T
    C = A @ mats.Psi @ A.T
    Sigma = mats.Lambda @ C @ mats.Lambda.T + mats.Omega
    return _State(mats, A, lat_input, M, C, mu, 0.5 * (Sigma + Sigma.T))


def _as_2d(z, r):
    z = np.asarray(z, dtype=float)
    return z.reshape(1, r) if z.ndim == 1 else z


def implied_moments(spec: SemSpec, theta, z=None) -> ImpliedMoments:
    """Mean and covariance of the indicators given covariate row(s) ``z``.

    ``z`` may be a single row (returns a 1-D mean) or a matrix.  The
    covariance is the same for every row.
    """
    r = len(spec.covariates)
    single = z is None or np.ndim(z) == 1
    Z = np.zeros((1, r)) if z is None else _as_2d(z, r)
    if Z.shape[1] != r:
        raise SpecError(f"z has {Z.shape[1]} columns, spec has {r} covariates")
    st = _state(spec, theta, Z)
    mean = st.mu[0] if single else st.mu
    return ImpliedMoments(mean, st.Sigma)


def _derivatives(spec: SemSpec, st: _State, Z: np.ndarray):
    """d mu (P, n, p) and d Sigma (P, p, p) for every free parameter."""
    n, r = Z.shape
    p, q, _ = spec.shape
    P = spec.n_free
    mats = st.mats
    dmu = np.zeros((P, n, p))
    dS = np.zeros((P, p, p))
    ones = np.ones(n)
    for j, slots in enumerate(spec.layout.slots):
        for mat, row, col in slots:
            if mat == "nu":
                dmu[j, :, row] += 1.0
            elif mat == "K":
                dmu[j, :, row] += Z[:, col]
            elif mat == "alpha" or mat == "Gamma":
                zcol = ones if mat == "alpha" else Z[:, col]
                # d M = z_col * A[:, row]
                dmu[j] += np.outer(zcol, mats.Lambda @ st.A[:, row])
            elif mat == "Lambda":
                dmu[j, :, row] += st.M[:, col]
                v = st.C[col] @ mats.Lambda.T  # row `col` of C Lambda'
                dS[j, row, :] += v
                dS[j, :, row] += v
            elif mat == "B":
                # dA = A E A  ->  dM = (lat_input @ A[col]) * A[:, row]
                s = st.lat_input @ st.A[col]
                dmu[j] += np.outer(s, mats.Lambda @ st.A[:, row])
                dA = np.outer(st.A[:, row], st.A[col])
                dC = dA @ mats.Psi @ st.A.T
                dC = dC + dC.T
                dS[j] += mats.Lambda @ dC @ mats.Lambda.T
            elif mat == "Psi":
                la = mats.Lambda @ st.A
                if row == col:
                    dS[j] += np.outer(la[:, row], la[:, row])
                else:
                    o = np.outer(la[:, row], la[:, col])
                    dS[j] += o + o.T
            elif mat == "Omega":
                dS[j, row, col] += 1.0
                if row != col:
                    dS[j, col, row] += 1.0
    return dmu, dS


class _Eval(NamedTuple):
    loglik: float
    ll_rows: np.ndarray
    score: np.ndarray | None  # (n, P) natural scale, unweighted rows
    info: np.ndarray | None  # expected information, weighted sum


def _evaluate(spec, theta, Y, Z, weights=None, score=False, info=False) -> _Eval:
    st = _state(spec, theta, Z)
    p = Y.shape[1]
    try:
        cho = sla.cho_factor(st.Sigma, lower=True)
    except (np.linalg.LinAlgError, ValueError):
        raise NumericalError("implied covariance is not positive definite") from None
    logdet = 2.0 * np.log(np.diag(cho[0])).sum()
    R = Y - st.mu
    W = sla.cho_solve(cho, R.T).T  # rows Sigma^-1 r_i
    quad = np.einsum("ij,ij->i", R, W)
    ll_rows = -0.5 * (p * LOG2PI + logdet + quad)
    w = np.ones(len(Y)) if weights is None else weights
    total = float(w @ ll_rows)
    if not (score or info):
        return _Eval(total, ll_rows, None, None)
    dmu, dS = _derivatives(spec, st, Z)
    Sinv = sla.cho_solve(cho, np.eye(p))
    P = spec.n_free
    S = None
    if score:
        mean_part = (dmu * W[None]).sum(axis=2).T
        outer = (W[:, :, None] * W[:, None, :]).reshape(len(Y), p * p)
        cov_part = outer @ dS.reshape(P, p * p).T
        trace = (dS * Sinv.T[None]).sum(axis=(1, 2))
        S = mean_part + 0.5 * (cov_part - trace[None, :])
    I = None
    if info:
        T = (dmu @ Sinv) * w[None, :, None]  # (P, n, p)
        I_mean = T.reshape(P, -1) @ dmu.reshape(P, -1).T
        SdS = Sinv[None] @ dS
        I_cov = 0.5 * (SdS.reshape(P, -1) @ SdS.transpose(0, 2, 1).reshape(P, -1).T) * w.sum()
        I = I_mean + I_cov
        I = 0.5 * (I + I.T)
    return _Eval(total, ll_rows, S, I)


def loglik(spec: SemSpec, theta, data) -> float:
    """Gaussian log-likelihood of the indicators given covariates."""
    Y, Z = extract(spec, data)
    return _evaluate(spec, theta, Y, Z).loglik


def score(spec: SemSpec, theta, data) -> np.ndarray:
    """Per-observation score matrix (n, n_free), natural parameter scale."""
    Y, Z = extract(spec, data)
    return _evaluate(spec, theta, Y, Z, score=True).score


def extract(spec: SemSpec, data, missing: str = "raise"):
    """Indicator and covariate matrices in spec order (complete cases)."""
    cols = list(spec.observed) + list(spec.covariates)
    values, _ = check_columns(data, cols, missing=missing)
    p = len(spec.observed)
    return values[:, :p], values[:, p:]


# ---------------------------------------------------------------- starting values
def default_start(spec: SemSpec, Y: np.ndarray, Z: np.ndarray, weights=None) -> np.ndarray:
    """Loadings 1, regressions 0, intercepts from sample means, variances half the sample variance."""
    w = np.ones(len(Y)) if weights is None else weights
    mean = w @ Y / w.sum()
    var = w @ (Y - mean) ** 2 / w.sum()
    var = np.where(var > 0, var, 1.0)
    oi = {n: k for k, n in enumerate(spec.observed)}
    ref = {l: spec.reference_indicator(l) for l in spec.latents}
    load_of = {}
    for i, l, _ in spec.loadings:
        load_of.setdefault(i, l)
    values = {}
    for mat, row, col, con, _ in spec._entries():
        if not hasattr(con, "label") or con.label in values:
            continue
        if mat == "Lambda":
            v = 1.0
        elif mat == "nu":
            name = spec.observed[row]
            l = load_of.get(name)
            base = mean[oi[ref[l]]] if l is not None and ref.get(l) else 0.0
            v = mean[row] - base
        elif mat == "alpha":
            l = spec.latents[row]
            v = mean[oi[ref[l]]] if ref.get(l) else 0.0
        elif mat == "Omega":
            v = 0.5 * var[row] if row == col else 0.0
        elif mat == "Psi":
            l = spec.latents[row]
            v = (0.5 * var[oi[ref[l]]] if ref.get(l) else 1.0) if row == col else 0.0
        else:
            v = 0.0
        values[con.label] = v
    return np.array([values[lab] for lab in spec.layout.labels])


# ---------------------------------------------------------------------- optimizer
@dataclass
class _OptResult:
    theta: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)


def _grad_ok(g_sum, w_sum, gtol):
    return g_sum.size == 0 or np.max(np.abs(g_sum)) / w_sum < gtol


def _fisher_scoring(spec, Y, Z, theta0, weights, max_iter, gtol, ftol) -> _OptResult:
    layout = spec.layout
    w_sum = len(Y) if weights is None else float(weights.sum())
    theta = np.asarray(theta0, dtype=float).copy()
    ev = _evaluate(spec, theta, Y, Z, weights, score=True, info=True)
    ll = ev.loglik
    trace = [ll]
    prev_change = np.inf
    for it in range(max_iter + 1):
        g = ev.score.T @ (np.ones(len(Y)) if weights is None else weights)
        if _grad_ok(g, w_sum, gtol) and (it == 0 or prev_change < ftol):
            return _OptResult(theta, ll, it, True, trace)
        if it == max_iter:
            break
        c = layout.chain_factor(theta)
        gu = g * c
        Iu = ev.info * np.outer(c, c)
        try:
            step = sla.solve(Iu + 1e-10 * np.trace(Iu) / len(c) * np.eye(len(c)), gu,
                             assume_a="pos")
        except (np.linalg.LinAlgError, ValueError):
            step = np.linalg.lstsq(Iu, gu, rcond=None)[0]
        u = layout.to_unconstrained(theta)
        t = 1.0
        accepted = False
        for _ in range(40):
            cand = layout.from_unconstrained(u + t * step)
            try:
                ll_new = _evaluate(spec, cand, Y, Z, weights).loglik
            except NumericalError:
                ll_new = -np.inf
            if np.isfinite(ll_new) and ll_new >= ll:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        prev_change = abs(ll_new - ll) / max(abs(ll), 1.0)
        theta = cand
        ll = ll_new
        trace.append(ll)
        ev = _evaluate(spec, theta, Y, Z, weights, score=True, info=True)
    g = ev.score.T @ (np.ones(len(Y)) if weights is None else weights)
    return _OptResult(theta, ll, it, bool(_grad_ok(g, w_sum, gtol)), trace)


def _bfgs(spec, Y, Z, theta0, weights, max_iter, gtol, ftol) -> _OptResult:
    layout = spec.layout
    w = np.ones(len(Y)) if weights is None else weights
    n = float(w.sum())
    trace = []

    def f(u):
        theta = layout.from_unconstrained(u)
        try:
            ev = _evaluate(spec, theta, Y, Z, weights, score=True)
        except NumericalError:
            return np.inf, np.zeros_like(u)
        trace.append(ev.loglik)
        return -ev.loglik / n, -(ev.score.T @ w) * layout.chain_factor(theta) / n

    res = minimize(f, layout.to_unconstrained(theta0), jac=True, method="BFGS",
                   options={"maxiter": max_iter, "gtol": gtol * 1e-2})
    theta = layout.from_unconstrained(res.x)
    ev = _evaluate(spec, theta, Y, Z, weights, score=True)
    ok = _grad_ok(ev.score.T @ w, n, gtol)
    return _OptResult(theta, ev.loglik, int(res.nit), bool(ok), trace)


def _observed_information(spec, theta, Y, Z, weights=None) -> np.ndarray:
    """Average observed information: central differences of the summed score."""
    P = len(theta)
    w = np.ones(len(Y)) if weights is None else weights
    H = np.empty((P, P))
    for j in range(P):
        h = 1e-5 * max(1.0, abs(theta[j]))
        if spec.layout.is_variance[j]:
            h = min(h, 0.5 * theta[j])
        tp, tm = theta.copy(), theta.copy()
        tp[j] += h
        tm[j] -= h
        gp = _evaluate(spec, tp, Y, Z, weights, score=True).score.T @ w
        gm = _evaluate(spec, tm, Y, Z, weights, score=True).score.T @ w
        H[:, j] = (gp - gm) / (2 * h)
    H = 0.5 * (H + H.T)
    return -H / w.sum()


def _inverse_information(info: np.ndarray) -> np.ndarray:
    try:
        cho = sla.cho_factor(info, lower=True)
    except (np.linalg.LinAlgError, ValueError):
        raise NumericalError("information matrix is not positive definite (rank deficient)") from None
    d = np.diag(cho[0])
    if d.min() <= 1e-7 * d.max():
        raise NumericalError("information matrix is numerically rank deficient")
    inv = sla.cho_solve(cho, np.eye(len(info)))
    return 0.5 * (inv + inv.T)


# ------------------------------------------------------------------------ results
@dataclass
class FitResult:
    """Outcome of :func:`fit_ml`.

    ``information`` is the average (per observation) observed information,
    ``vcov = information^-1 / n`` and ``influence = score_matrix @ information^-1``
    so that ``influence.T @ influence / n`` estimates ``information^-1``.
    All quantities are on the natural parameter scale.
    """

    spec: SemSpec
    theta_hat: ParamVector
    loglik: float
    score_matrix: np.ndarray
    information: np.ndarray
    vcov: np.ndarray
    influence: np.ndarray
    converged: bool
    iterations: int
    n_obs: int
    loglik_trace: list = field(default_factory=list, repr=False)

    @property
    def labels(self) -> tuple[str, ...]:
        return self.spec.layout.labels

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    @property
    def n_params(self) -> int:
        return self.spec.n_free

    @property
    def aic(self) -> float:
        return -2.0 * self.loglik + 2.0 * self.n_params


def fit_ml(
    spec: SemSpec,
    data=None,
    start=None,
    *,
    Y=None,
    Z=None,
    method: str = "fisher",
    max_iter: int = 200,
    gtol: float = 1e-6,
    ftol: float = 1e-10,
    missing: str = "raise",
    weights=None,
    compute_inference: bool = True,
) -> FitResult:
    """Maximum likelihood fit of ``spec`` to complete-case ``data``.

    Parameters
    ----------
    spec : SemSpec
    data : DataFrame or mapping, optional
        Must contain the observed indicators and covariates of ``spec``.
        Alternatively pass the matrices ``Y`` and ``Z`` directly.
    start : array-like or mapping, optional
        Natural-scale starting values; defaults to :func:`default_start`.
    method : {"fisher", "bfgs"}
        Fisher scoring with step halving, or scipy's BFGS on the
        log-variance parameterization.
    compute_inference : bool
        Skip the observed information and influence functions when False
        (``information``, ``vcov`` and ``influence`` are then NaN).

    Returns
    -------
    FitResult
        ``converged`` is False when the gradient criterion was not met
        within ``max_iter`` iterations; no exception is raised in that case.
    """
    if Y is None:
        Y, Z = extract(spec, data, missing=missing)
    Y = np.asarray(Y, dtype=float)
    Z = np.zeros((len(Y), 0)) if Z is None else np.asarray(Z, dtype=float)
    if Y.shape[1] != len(spec.observed) or Z.shape[1] != len(spec.covariates):
        raise SpecError("data matrices do not match the spec dimensions")
    n = len(Y)
    if n <= spec.n_free:
        raise SpecError(f"need more observations ({n}) than free parameters ({spec.n_free})")
    theta0 = default_start(spec, Y, Z, weights) if start is None else spec.param_vector(start).values
    if method == "fisher":
        opt = _fisher_scoring(spec, Y, Z, theta0, weights, max_iter, gtol, ftol)
    elif method == "bfgs":
        opt = _bfgs(spec, Y, Z, theta0, weights, max_iter, gtol, ftol)
    else:
        raise ValueError(f"unknown method {method!r}")
    ev = _evaluate(spec, opt.theta, Y, Z, weights, score=True)
    P = spec.n_free
    if compute_inference:
        info = _observed_information(spec, opt.theta, Y, Z, weights)
        inv = _inverse_information(info)
        vcov = inv / (n if weights is None else weights.sum())
        influence = ev.score @ inv
    else:
        info = np.full((P, P), np.nan)
        vcov = np.full((P, P), np.nan)
        influence = np.full((n, P), np.nan)
    return FitResult(
        spec=spec,
        theta_hat=ParamVector(opt.theta, spec.layout),
        loglik=ev.loglik,
        score_matrix=ev.score,
        information=info,
        vcov=vcov,
        influence=influence,
        converged=opt.converged,
        iterations=opt.iterations,
        n_obs=n,
        loglik_trace=opt.trace,
    )


def latent_posterior(spec: SemSpec, theta, Y, Z):
    """Conditional mean (n, q) and covariance (q, q) of the latents given data.

    ``m = A(alpha + Gamma z) + C Lambda' Sigma^-1 (y - mu)`` and
    ``v = C - C Lambda' Sigma^-1 Lambda C`` with ``C = A Psi A'``.
    """
    st = _state(spec, theta, Z)
    try:
        cho = sla.cho_factor(st.Sigma, lower=True)
    except (np.linalg.LinAlgError, ValueError):
        raise NumericalError("implied covariance Sigma_X is singular") from None
    cross = st.C @ st.mats.Lambda.T  # Cov(latent, indicators)
    gain = sla.cho_solve(cho, cross.T).T  # cross Sigma^-1
    m = st.M + (Y - st.mu) @ gain.T
    v = st.C - gain @ cross.T
    return m, 0.5 * (v + v.T)


class LinearSEM(BaseEstimator):
    """Linear SEM fitted by maximum likelihood.

    Parameters
    ----------
    spec : SemSpec
    method : {"fisher", "bfgs"}
    max_iter : int
    tol : float
        Convergence threshold on the largest absolute mean score.
    missing : {"raise", "drop"}
        Complete-case policy for rows with missing cells.

    Attributes
    ----------
    result_ : FitResult
    params_ : dict
        Estimates keyed by parameter label.
    """

    def __init__(self, spec=None, method="fisher", max_iter=200, tol=1e-6, missing="raise"):
        self.spec = spec
        self.method = method
        self.max_iter = max_iter
        self.tol = tol
        self.missing = missing

    def fit(self, X, y=None, start=None):
        if not isinstance(self.spec, SemSpec):
            raise SpecError("LinearSEM requires a SemSpec")
        self.result_ = fit_ml(self.spec, X, start=start, method=self.method,
                              max_iter=self.max_iter, gtol=self.tol, missing=self.missing)
        if not self.result_.converged:
            raise ConvergenceError(
                f"ML fit did not converge within {self.max_iter} iterations"
            )
        self.params_ = self.result_.theta_hat.as_dict()
        return self

    def score(self, X, y=None) -> float:
        """Mean log-likelihood per observation."""
        check_is_fitted(self, "result_")
        Y, Z = extract(self.spec, X, missing=self.missing)
        return _evaluate(self.spec, self.result_.theta_hat, Y, Z).loglik / len(Y)

    def transform(self, X) -> np.ndarray:
        """Empirical Bayes latent scores ``E[latent | indicators, covariates]``."""
        check_is_fitted(self, "result_")
        Y, Z = extract(self.spec, X, missing=self.missing)
        return latent_posterior(self.spec, self.result_.theta_hat, Y, Z)[0]

    def fit_transform(self, X, y=None):
        return self.fit(X).transform(X)
