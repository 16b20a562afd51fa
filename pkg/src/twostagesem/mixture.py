"""Stage-1 model with a Gaussian-mixture latent predictor.

The latent residual is a K-component mixture that differs across components
only in the latent intercepts; loadings, residual variances and covariate
paths are shared.  Internally the component intercepts are written as paths
from K class-indicator dummies, so for a known class every row follows the
ordinary linear SEM and the M-step is a weighted linear SEM fit on the data
stacked K times.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator

from . import linsem
from ._validation import check_is_fitted
from .exceptions import ConvergenceError, NumericalError, SpecError
from .model import Fixed, Free, ParamVector, SemSpec
from .predict import ConditionalMoments

DEGENERATE_PI = 1e-4


def _dummy(k: int) -> str:
    return f"__class{k + 1}"


def mixture_spec(spec: SemSpec, K: int) -> tuple[SemSpec, dict]:
    """Spec with component intercepts as class-dummy paths.

    Returns the augmented spec and a map ``latent -> [label_1, ..., label_K]``.
    """
    icpt = dict(spec.intercepts)
    mixed = [l for l in spec.latents if isinstance(icpt.get(l, Fixed(0.0)), Free)]
    if not mixed:
        raise SpecError("mixture model needs at least one latent with a free intercept")
    labels, regs = {}, []
    for l in mixed:
        base = icpt[l].label
        labels[l] = [f"{base}@{k + 1}" for k in range(K)]
        regs += [(l, _dummy(k), Free(labels[l][k])) for k in range(K)]
    intercepts = tuple((n, Fixed(0.0)) if n in mixed else (n, c) for n, c in spec.intercepts)
    aug = SemSpec(
        observed=spec.observed, latents=spec.latents,
        covariates=spec.covariates + tuple(_dummy(k) for k in range(K)),
        loadings=spec.loadings, regressions=spec.regressions + tuple(regs),
        intercepts=intercepts, variances=spec.variances, covariances=spec.covariances,
    )
    return aug, labels


def _stack(Y, Z, K):
    n = len(Y)
    Ys = np.tile(Y, (K, 1))
    D = np.kron(np.eye(K), np.ones((n, 1)))
    Zs = np.hstack([np.tile(Z, (K, 1)), D])
    return Ys, Zs


class _Problem:
    """Mixture log-likelihood in the flat coordinates ``(theta_aug, rho)``.

    ``rho_k = log(pi_k / pi_1)`` for ``k = 2..K``.
    """

    def __init__(self, spec, aug, K, Y, Z):
        self.spec, self.aug, self.K = spec, aug, K
        self.Y, self.Z = Y, Z
        self.n = len(Y)
        self.Ys, self.Zs = _stack(Y, Z, K)
        self.P = aug.n_free

    def split(self, flat):
        return flat[: self.P], np.concatenate([[0.0], flat[self.P:]])

    @staticmethod
    def log_pi(rho):
        return rho - logsumexp(rho)

    def component_ll(self, theta):
        ev = linsem._evaluate(self.aug, theta, self.Ys, self.Zs)
        return ev.ll_rows.reshape(self.K, self.n).T

    def estep(self, flat):
        theta, rho = self.split(flat)
        lj = self.component_ll(theta) + self.log_pi(rho)[None, :]
        lse = logsumexp(lj, axis=1)
        post = np.exp(lj - lse[:, None])
        return float(lse.sum()), post / post.sum(axis=1, keepdims=True)

    def loglik(self, flat):
        return self.estep(flat)[0]

    def score(self, flat):
        """Per-observation score (n, P + K - 1) by the Fisher identity."""
        theta, rho = self.split(flat)
        ev = linsem._evaluate(self.aug, theta, self.Ys, self.Zs, score=True)
        lj = ev.ll_rows.reshape(self.K, self.n).T + self.log_pi(rho)[None, :]
        post = np.exp(lj - logsumexp(lj, axis=1, keepdims=True))
        S = ev.score.reshape(self.K, self.n, self.P)
        s_theta = np.einsum("in,ink->nk", post.T, S)
        s_rho = post[:, 1:] - np.exp(self.log_pi(rho))[None, 1:]
        return np.hstack([s_theta, s_rho])

    def is_variance(self):
        return np.concatenate([self.aug.layout.is_variance, np.zeros(self.K - 1, dtype=bool)])

    def information(self, flat):
        """Average observed information by central differences of the summed score."""
        d = len(flat)
        var = self.is_variance()
        H = np.empty((d, d))
        for j in range(d):
            h = 1e-5 * max(1.0, abs(flat[j]))
            if var[j]:
                h = min(h, 0.5 * flat[j])
            fp, fm = flat.copy(), flat.copy()
            fp[j] += h
            fm[j] -= h
            H[:, j] = (self.score(fp).sum(0) - self.score(fm).sum(0)) / (2 * h)
        return -0.5 * (H + H.T) / self.n


@dataclass
class MixtureFit:
    """K-component stage-1 fit.

    Attributes
    ----------
    K : int
    pi_hat : ndarray (K,)
    theta_hat : ParamVector
        Parameters of the augmented spec; component-specific latent
        intercepts carry labels ``"<intercept label>@k"``.
    intercepts : dict
        ``latent -> ndarray (K,)`` of component intercepts, ascending for
        the first mixed latent (the canonical order).
    posterior : ndarray (n, K)
        ``P(G_i = k | X_i, Z_i)``.
    influence : ndarray (n, P + K - 1)
        Influence functions of ``theta1 = (theta_hat, log(pi_k / pi_1))``.
    """

    spec: SemSpec
    aug_spec: SemSpec
    K: int
    pi_hat: np.ndarray
    theta_hat: ParamVector
    intercepts: dict
    posterior: np.ndarray
    loglik: float
    aic: float
    score_matrix: np.ndarray
    information: np.ndarray
    vcov: np.ndarray
    influence: np.ndarray
    converged: bool
    iterations: int
    n_obs: int
    loglik_trace: list = field(default_factory=list, repr=False)
    restart_logliks: list = field(default_factory=list)
    degenerate_restarts: int = 0
    base_fit: "linsem.FitResult | None" = field(default=None, repr=False)

    @property
    def theta1(self) -> np.ndarray:
        """Flat stage-1 vector ``(theta_hat, rho)`` with ``rho_k = log(pi_k / pi_1)``."""
        if self.K == 1:
            return self.theta_hat.values.copy()
        return np.concatenate([self.theta_hat.values, np.log(self.pi_hat[1:] / self.pi_hat[0])])

    @property
    def labels(self) -> tuple:
        return self.aug_spec.layout.labels + tuple(f"logit_pi@{k + 1}" for k in range(1, self.K))

    @property
    def n_params(self) -> int:
        return len(self.theta1)

    def with_theta1(self, theta1) -> "MixtureFit":
        """Copy evaluated at another ``theta1`` (posterior recomputed lazily by callers)."""
        theta1 = np.asarray(theta1, dtype=float)
        P = self.aug_spec.n_free
        if self.K == 1:
            return replace(self, theta_hat=ParamVector(theta1, self.aug_spec.layout))
        rho = np.concatenate([[0.0], theta1[P:]])
        pi = np.exp(rho - logsumexp(rho))
        return replace(self, theta_hat=ParamVector(theta1[:P], self.aug_spec.layout), pi_hat=pi)

    def component_moments(self, data, missing="raise"):
        """Per-component conditional moments and posterior class probabilities for ``data``."""
        Y, Z = linsem.extract(self.spec, data, missing=missing)
        return self._components(Y, Z)

    def _components(self, Y, Z):
        n = len(Y)
        comps, ll = [], np.empty((n, self.K))
        for k in range(self.K):
            Zk = Z if self.K == 1 else np.hstack([Z, np.tile(np.eye(self.K)[k], (n, 1))])
            m, v = linsem.latent_posterior(self.aug_spec, self.theta_hat, Y, Zk)
            comps.append(ConditionalMoments(m, v, self.spec.latents))
            ll[:, k] = linsem._evaluate(self.aug_spec, self.theta_hat, Y, Zk).ll_rows
        lj = ll + np.log(self.pi_hat)[None, :]
        post = np.exp(lj - logsumexp(lj, axis=1, keepdims=True))
        return comps, post / post.sum(axis=1, keepdims=True)


def _initial_posterior(scores, K, rng):
    # soft assignment around jittered quantile centres of the latent scores
    q = np.sort(np.clip((np.arange(K) + 0.5) / K + rng.uniform(-0.5, 0.5, K) / K, 0.01, 0.99))
    centres = np.quantile(scores, q)
    width = np.std(scores) / K
    d = -0.5 * ((scores[:, None] - centres[None, :]) / width) ** 2
    return np.exp(d - logsumexp(d, axis=1, keepdims=True))


def _em_run(prob: _Problem, flat0, post0, max_iter, tol, m_steps):
    """EM from initial responsibilities.

    Returns ``(flat, loglik, trace, iterations, converged, posterior)``.
    """
    aug, K, n = prob.aug, prob.K, prob.n
    theta = flat0[: prob.P].copy()
    post = post0
    trace = []
    ll_old = -np.inf
    for it in range(1, max_iter + 1):
        w = post.T.reshape(-1)
        pi = np.clip(post.mean(axis=0), 1e-300, None)
        opt = linsem._fisher_scoring(aug, prob.Ys, prob.Zs, theta, w, m_steps, 0.0, 0.0)
        theta = opt.theta
        flat = np.concatenate([theta, np.log(pi[1:] / pi[0])])
        ll, post = prob.estep(flat)
        trace.append(ll)
        if np.isfinite(ll_old) and abs(ll - ll_old) <= tol * max(abs(ll), 1.0):
            return flat, ll, trace, it, True, post
        ll_old = ll
    return flat, ll, trace, max_iter, False, post


def _newton_polish(prob: _Problem, flat, ll, gtol=1e-6, max_iter=20):
    """A few damped Newton steps on the mixture log-likelihood."""
    var = prob.is_variance()
    for _ in range(max_iter):
        g = prob.score(flat).mean(0)
        if np.max(np.abs(g)) < gtol:
            return flat, ll, True
        # eigenvalue-clipped Newton direction so flat directions cannot send the step uphill
        w, V = np.linalg.eigh(prob.information(flat))
        if not np.all(np.isfinite(w)):
            return flat, ll, False
        w = np.maximum(w, 1e-8 * max(w.max(), 1e-300))
        step = V @ ((V.T @ g) / w)
        t = 1.0
        for _ in range(30):
            cand = flat + t * step
            # keep variances positive via multiplicative damping
            if np.all(cand[var] > 0):
                try:
                    ll_c = prob.loglik(cand)
                except NumericalError:
                    ll_c = -np.inf
                if ll_c >= ll - 1e-12 * abs(ll):
                    break
            t *= 0.5
        else:
            return flat, ll, False
        flat, ll = cand, max(ll, ll_c)
    return flat, ll, bool(np.max(np.abs(prob.score(flat).mean(0))) < gtol)


def _canonical(prob: _Problem, flat, labels):
    """Reorder components by the first mixed latent's intercept, ascending."""
    theta, rho = prob.split(flat)
    idx = prob.aug.layout.index
    first = next(iter(labels.values()))
    order = np.argsort([theta[idx[lab]] for lab in first], kind="stable")
    theta = theta.copy()
    for labs in labels.values():
        vals = np.array([theta[idx[lab]] for lab in labs])[order]
        for lab, val in zip(labs, vals):
            theta[idx[lab]] = val
    rho = rho[order]
    return np.concatenate([theta, rho[1:] - rho[0]])


def fit_mixture(
    spec: SemSpec,
    data=None,
    K: int = 2,
    restarts: int = 5,
    seed: int | None = 0,
    *,
    Y=None,
    Z=None,
    max_iter: int = 500,
    tol: float = 1e-9,
    m_steps: int = 2,
    screen_iter: int = 20,
    missing: str = "raise",
    compute_inference: bool = True,
) -> MixtureFit:
    """EM fit of the mixture stage-1 model, best of ``restarts`` jittered starts.

    Parameters
    ----------
    spec : SemSpec
        The Gaussian stage-1 spec; latents with a free intercept get
        component-specific intercepts.
    K : int
        Number of components.  ``K = 1`` returns the ordinary ML fit.
    restarts : int
        Each run starts from soft responsibilities centred at jittered
        quantiles of the Gaussian-model latent scores and is iterated
        ``screen_iter`` times; the best run then continues to convergence.
    tol : float
        EM stops when the relative log-likelihood change is below ``tol``.

    Notes
    -----
    Runs whose smallest mixing proportion falls below ``1e-4`` are
    discarded as degenerate.  Components are sorted by intercept.
    """
    if K < 1 or int(K) != K:
        raise SpecError("K must be a positive integer")
    if Y is None:
        Y, Z = linsem.extract(spec, data, missing=missing)
    Z = np.zeros((len(Y), 0)) if Z is None else Z
    base = linsem.fit_ml(spec, Y=Y, Z=Z, compute_inference=compute_inference or K == 1)
    n = len(Y)
    if K == 1:
        return MixtureFit(
            spec=spec, aug_spec=spec, K=1, pi_hat=np.ones(1), theta_hat=base.theta_hat,
            intercepts={l: np.array([base.theta_hat[dict(spec.intercepts)[l].label]])
                        for l in spec.latents if isinstance(dict(spec.intercepts).get(l), Free)},
            posterior=np.ones((n, 1)), loglik=base.loglik, aic=base.aic,
            score_matrix=base.score_matrix, information=base.information, vcov=base.vcov,
            influence=base.influence, converged=base.converged, iterations=base.iterations,
            n_obs=n, loglik_trace=list(base.loglik_trace), restart_logliks=[base.loglik],
            base_fit=base,
        )
    aug, labels = mixture_spec(spec, K)
    prob = _Problem(spec, aug, K, Y, Z)
    scores = linsem.latent_posterior(spec, base.theta_hat, Y, Z)[0][:, spec.latents.index(next(iter(labels)))]
    base_vals = base.theta_hat.as_dict()
    icpt = dict(spec.intercepts)
    flat0 = np.array([base_vals.get(lab, 0.0) for lab in aug.layout.labels] + [0.0] * (K - 1))
    for l, labs in labels.items():
        for lab in labs:
            flat0[aug.layout.index[lab]] = base_vals[icpt[l].label]

    # short runs from every start, then the best one is iterated to convergence
    seeds = np.random.SeedSequence(seed).spawn(restarts)
    runs, degenerate = [], 0
    for r, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        post0 = _initial_posterior(scores, K, rng)
        try:
            res = _em_run(prob, flat0, post0, min(screen_iter, max_iter), tol, m_steps)
        except NumericalError:
            degenerate += 1
            continue
        if np.exp(prob.log_pi(prob.split(res[0])[1])).min() < DEGENERATE_PI:
            degenerate += 1
            continue
        runs.append((res[1], r, res))
    if not runs:
        raise ConvergenceError("all mixture EM runs were degenerate or failed")
    runs.sort(key=lambda t: (-t[0], t[1]))
    flat, ll, trace, iters, done, post = runs[0][2]
    if not done and iters < max_iter:
        flat, ll, more, extra, done, post = _em_run(prob, flat, post, max_iter - iters, tol, m_steps)
        trace = trace + more
        iters += extra
    flat, ll, grad_ok = _newton_polish(prob, flat, ll)
    flat = _canonical(prob, flat, labels)
    ll, post = prob.estep(flat)
    theta, rho = prob.split(flat)
    pi = np.exp(prob.log_pi(rho))
    S = prob.score(flat)
    d = len(flat)
    if compute_inference:
        info = prob.information(flat)
        inv = linsem._inverse_information(info)
        vcov, influence = inv / n, S @ inv
    else:
        info = vcov = np.full((d, d), np.nan)
        influence = np.full((n, d), np.nan)
    idx = aug.layout.index
    return MixtureFit(
        spec=spec, aug_spec=aug, K=K, pi_hat=pi,
        theta_hat=ParamVector(theta, aug.layout),
        intercepts={l: np.array([theta[idx[lab]] for lab in labs]) for l, labs in labels.items()},
        posterior=post, loglik=ll, aic=-2.0 * ll + 2.0 * d,
        score_matrix=S, information=info, vcov=vcov, influence=influence,
        converged=bool(grad_ok), iterations=iters, n_obs=n, loglik_trace=trace,
        restart_logliks=[r[0] for r in sorted(runs, key=lambda t: t[1])],
        degenerate_restarts=degenerate, base_fit=base,
    )


def mixture_influence(fit: MixtureFit) -> np.ndarray:
    """Influence functions of the stage-1 mixture parameters (n, P + K - 1)."""
    if not fit.converged:
        raise ConvergenceError("influence functions require a converged mixture fit")
    return fit.influence


class MixtureSEM(BaseEstimator):
    """Gaussian-mixture stage-1 SEM fitted by EM.

    Parameters
    ----------
    spec : SemSpec
    n_components : int
    restarts : int
    random_state : int or None
    """

    def __init__(self, spec=None, n_components=2, restarts=5, random_state=0, missing="raise"):
        self.spec = spec
        self.n_components = n_components
        self.restarts = restarts
        self.random_state = random_state
        self.missing = missing

    def fit(self, X, y=None):
        if not isinstance(self.spec, SemSpec):
            raise SpecError("MixtureSEM requires a SemSpec")
        self.result_ = fit_mixture(self.spec, X, K=self.n_components, restarts=self.restarts,
                                   seed=self.random_state, missing=self.missing)
        self.weights_ = self.result_.pi_hat
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "result_")
        return self.result_.component_moments(X, missing=self.missing)[1]

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def transform(self, X) -> np.ndarray:
        """Posterior-mean latent scores."""
        comps, post = self.result_.component_moments(X, missing=self.missing)
        return sum(p[:, None] * c.m for p, c in zip(post.T, comps))

    def score(self, X, y=None) -> float:
        """Mean log-likelihood per observation."""
        check_is_fitted(self, "result_")
        fit = self.result_
        Y, Z = linsem.extract(fit.spec, X, missing=self.missing)
        if fit.K == 1:
            return linsem._evaluate(fit.spec, fit.theta_hat, Y, Z).loglik / len(Y)
        prob = _Problem(fit.spec, fit.aug_spec, fit.K, Y, Z)
        return prob.loglik(fit.theta1) / len(Y)

    @property
    def aic_(self):
        check_is_fitted(self, "result_")
        return self.result_.aic
