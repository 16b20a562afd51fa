"""Two-stage estimation of non-linear structural equation models.

Stage 1 fits a linear (or Gaussian-mixture) SEM for the latent predictors,
whose conditional law given the indicators yields ``E[phi(xi) | X, Z]``.
Stage 2 fits a linear SEM for the outcome block with those predictions as
observed covariates.  Standard errors combine both stages through the
influence functions

    IF3_i = IF2_i + H2^-1 D IF1_i,      D = n^-1 sum_i d U2_i / d theta1,

where ``U2`` is the stage-2 score, ``H2`` the stage-2 information and
``IF1`` the stage-1 influence functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import stats
from sklearn.base import BaseEstimator

from . import linsem
from ._validation import as_frame, check_columns, check_is_fitted
from .exceptions import ConvergenceError, IdentificationError, SpecError
from .linsem import FitResult
from .mixture import MixtureFit, fit_mixture
from .model import Free, ParamVector, SemSpec
from .predict import (
    ConditionalMoments,
    Linear,
    NaturalSpline,
    NonlinearBasis,
    predict,
)

PSI2_NOTE = (
    "latent residual covariance of stage 2 absorbs the prediction error "
    "B Var(phi - E[phi | X, Z]) B' and is not a consistent estimate of Psi"
)


# ------------------------------------------------------------ construction
def _is_mixture(stage1) -> bool:
    return isinstance(stage1, MixtureFit)


def stage1_theta(stage1) -> np.ndarray:
    return stage1.theta1 if _is_mixture(stage1) else stage1.theta_hat.values.copy()


def stage1_at(stage1, theta1):
    """Stage-1 result with parameters replaced by ``theta1``."""
    if _is_mixture(stage1):
        return stage1.with_theta1(theta1)
    return replace(stage1, theta_hat=ParamVector(np.asarray(theta1, float), stage1.spec.layout))


def build_stage2_spec(stage2_spec: SemSpec, names: Sequence[str], target: str) -> SemSpec:
    """Add ``target ~ prediction`` paths and the prediction covariates."""
    if target not in stage2_spec.latents:
        raise SpecError(f"target {target!r} is not a stage-2 latent")
    have = {(t, s) for t, s, _ in stage2_spec.regressions}
    paths = [(target, nm, Free(f"{target}~{nm}")) for nm in names if (target, nm) not in have]
    return stage2_spec.with_paths(paths, covariates=names)


def check_stage2(stage1_spec: SemSpec, stage2_spec: SemSpec, names: Sequence[str]) -> None:
    """Identification and covariate requirements for the stage-2 model.

    Raises
    ------
    IdentificationError
        A stage-2 latent lacks a reference indicator, the latent residual
        covariance is not fully free, or a structural covariate is absent
        from stage 1.
    """
    for l in stage2_spec.latents:
        if stage2_spec.reference_indicator(l) is None:
            raise IdentificationError(
                f"stage-2 latent {l!r} must be identified by a reference indicator "
                "(loading fixed to 1, intercept fixed to 0)"
            )
    var = dict(stage2_spec.variances)
    for l in stage2_spec.latents:
        if not isinstance(var.get(l), Free):
            raise IdentificationError(f"stage-2 latent variance of {l!r} must be free")
    lat = stage2_spec.latents
    if len(lat) > 1:
        cov = {frozenset((a, b)): c for a, b, c in stage2_spec.covariances}
        for i, a in enumerate(lat):
            for b in lat[i + 1:]:
                if not isinstance(cov.get(frozenset((a, b))), Free):
                    raise IdentificationError(
                        "stage-2 latent residual covariance must be unstructured (all entries free)"
                    )
    allowed = set(stage1_spec.covariates) | set(stage1_spec.observed) | set(names)
    extra = [c for c in stage2_spec.covariates if c not in allowed]
    if extra:
        raise IdentificationError(
            f"stage-2 covariates {extra} do not appear in the stage-1 model; covariates "
            "used in stage 2 must also be stage-1 covariates"
        )


@dataclass
class TwoStageFit:
    """Result of :func:`twostage_fit`.

    Attributes
    ----------
    stage1 : FitResult or MixtureFit
    stage2 : FitResult
        Fit of ``stage2_spec`` (the user spec augmented with prediction paths).
    basis : NonlinearBasis
        With data-dependent settings resolved.
    sandwich_vcov : ndarray
        Two-stage variance of the stage-2 parameters in ``sandwich_labels``
        (all except the latent residual covariance block).
    if3 : ndarray (n, len(sandwich_labels))
    psi2_note : str
        Warning attached to the stage-2 latent residual covariance.
    """

    stage1: object
    stage2: FitResult
    stage2_spec: SemSpec
    basis: NonlinearBasis
    target: str
    prediction_names: tuple
    predictions: np.ndarray
    sandwich_vcov: np.ndarray
    sandwich_labels: tuple
    if3: np.ndarray
    if2: np.ndarray
    D: np.ndarray
    latent_mean_range: tuple
    psi2_labels: tuple
    psi2_note: str = PSI2_NOTE
    naive_vcov: np.ndarray = field(default=None, repr=False)

    @property
    def estimates(self) -> dict:
        return self.stage2.theta_hat.as_dict()

    @property
    def se(self) -> dict:
        """Two-stage standard errors (NaN for the latent residual covariance block)."""
        out = dict.fromkeys(self.stage2_spec.layout.labels, np.nan)
        out.update(zip(self.sandwich_labels, np.sqrt(np.clip(np.diag(self.sandwich_vcov), 0, None))))
        return out

    def coef(self, label: str) -> float:
        return self.stage2.theta_hat[label]

    def structural_labels(self) -> list:
        return [f"{self.target}~{nm}" for nm in self.prediction_names]

    def table(self) -> pd.DataFrame:
        """Parameter table with Estimate, Std.Error, Z and p columns."""
        est = self.estimates
        se = self.se
        rows = []
        for lab, kind in zip(self.stage2_spec.layout.labels, self.stage2_spec.layout.kinds):
            e, s = est[lab], se[lab]
            z = e / s if np.isfinite(s) and s > 0 else np.nan
            p = 2 * stats.norm.sf(abs(z)) if np.isfinite(z) else np.nan
            rows.append((lab, _KIND_NAMES[kind], e, s, z, p))
        df = pd.DataFrame(rows, columns=["parameter", "type", "Estimate", "Std.Error", "Z", "p"])
        return df.set_index("parameter")

    def report(self) -> str:
        """Plain-text parameter table grouped by parameter type."""
        tab = self.table()
        lines = []
        width = max(len(i) for i in tab.index) + 3
        head = f"{'':{width}}{'Estimate':>12}{'Std.Error':>12}{'Z':>10}{'p':>12}"
        lines.append(head)
        for kind in _KIND_ORDER:
            sub = tab[tab["type"] == kind]
            if sub.empty:
                continue
            lines.append(f"{kind}:")
            for lab, r in sub.iterrows():
                se = "" if not np.isfinite(r["Std.Error"]) else f"{r['Std.Error']:12.5f}"
                z = "" if not np.isfinite(r["Z"]) else f"{r['Z']:10.3f}"
                p = "" if not np.isfinite(r["p"]) else (
                    "<1e-12" if r["p"] < 1e-12 else f"{r['p']:.4g}")
                lines.append(f"   {lab:{width - 3}}{r['Estimate']:12.5f}{se:>12}{z:>10}{p:>12}")
        lines.append(f"Note: {self.psi2_note}.")
        return "\n".join(lines)


_KIND_NAMES = {"Lambda": "Measurements", "K": "Measurement covariates", "B": "Regressions",
               "Gamma": "Regressions", "nu": "Intercepts", "alpha": "Intercepts",
               "Omega": "Residual Variances", "Psi": "Latent Residual Covariance"}
_KIND_ORDER = ["Measurements", "Measurement covariates", "Regressions", "Intercepts",
               "Residual Variances", "Latent Residual Covariance"]


# ----------------------------------------------------------------- fitting
class _Pipeline:
    """Stage-2 data and score as a function of the stage-1 parameters."""

    def __init__(self, stage1, basis, frame, spec2: SemSpec, names):
        self.stage1, self.basis, self.frame = stage1, basis, frame
        self.spec2, self.names = spec2, tuple(names)
        self.Y2, _ = check_columns(frame, spec2.observed)
        other = [c for c in spec2.covariates if c not in self.names]
        self.fixed_cols = dict(zip(other, check_columns(frame, other)[0].T))

    def covariates(self, pred: np.ndarray) -> np.ndarray:
        cols = dict(self.fixed_cols)
        cols.update(zip(self.names, pred.T))
        if not self.spec2.covariates:
            return np.zeros((len(self.Y2), 0))
        return np.column_stack([cols[c] for c in self.spec2.covariates])

    def predictions(self, theta1=None) -> np.ndarray:
        st1 = self.stage1 if theta1 is None else stage1_at(self.stage1, theta1)
        return predict(st1, self.basis, self.frame).values

    def score_sum(self, theta2, theta1) -> np.ndarray:
        Z2 = self.covariates(self.predictions(theta1))
        return linsem._evaluate(self.spec2, theta2, self.Y2, Z2, score=True).score.sum(axis=0)


def _complete_frame(data, columns, missing):
    frame = as_frame(data)
    _, keep = check_columns(frame, columns, missing=missing)
    return frame.loc[keep].reset_index(drop=True) if not keep.all() else frame


def fit_stage1(stage1_spec, frame, mixture_K=None, restarts=5, seed=0, compute_inference=True):
    if mixture_K is None:
        return linsem.fit_ml(stage1_spec, frame, compute_inference=compute_inference)
    return fit_mixture(stage1_spec, frame, K=int(mixture_K), restarts=restarts, seed=seed,
                       compute_inference=compute_inference)


def twostage_fit(
    stage1_spec: SemSpec,
    stage2_spec: SemSpec,
    basis: NonlinearBasis,
    data,
    mixture_K: int | None = None,
    *,
    target: str | None = None,
    restarts: int = 5,
    seed: int | None = 0,
    stage1=None,
    start2=None,
    missing: str = "raise",
    sandwich: bool = True,
) -> TwoStageFit:
    """Fit the two-stage estimator.

    Parameters
    ----------
    stage1_spec : SemSpec
        Linear SEM for the latent predictors and their indicators.
    stage2_spec : SemSpec
        Linear SEM for the outcome block.  Paths ``target ~ prediction``
        and the prediction covariates are added automatically; direct
        effects of stage-1 indicators may be declared by listing those
        indicator columns as stage-2 covariates.
    basis : NonlinearBasis
    mixture_K : int, optional
        Fit the stage-1 latent law as a ``mixture_K``-component Gaussian
        mixture.  ``None`` uses the Gaussian model.
    target : str, optional
        Stage-2 latent receiving the non-linear effect (default: first).
    stage1 : FitResult or MixtureFit, optional
        Reuse an existing stage-1 fit.
    start2 : optional
        Starting values for stage 2.

    Returns
    -------
    TwoStageFit
    """
    target = target or stage2_spec.latents[0]
    cols = list(dict.fromkeys(
        list(stage1_spec.observed) + list(stage1_spec.covariates)
        + list(stage2_spec.observed) + list(stage2_spec.covariates)))
    names_probe = basis.names(stage1_spec.latents)
    cols = [c for c in cols if c not in names_probe]
    frame = _complete_frame(data, cols, missing)

    if stage1 is None:
        stage1 = fit_stage1(stage1_spec, frame, mixture_K, restarts, seed, compute_inference=sandwich)
    if not stage1.converged:
        raise ConvergenceError("stage-1 fit did not converge")

    # resolve data-dependent basis settings at the stage-1 estimate
    if _is_mixture(stage1):
        comps, post = stage1.component_moments(frame)
        m_all = sum(p[:, None] * c.m for p, c in zip(post.T, comps))
        mom = ConditionalMoments(m_all, comps[0].v, comps[0].latents)
    else:
        from .predict import conditional_moments

        mom = conditional_moments(stage1, frame)
    basis = basis.prepare(mom)
    names = tuple(basis.names(stage1_spec.latents))
    check_stage2(stage1_spec, stage2_spec, names)
    spec2 = build_stage2_spec(stage2_spec, names, target)
    check_stage2(stage1_spec, spec2, names)

    pipe = _Pipeline(stage1, basis, frame, spec2, names)
    pred = pipe.predictions()
    Z2 = pipe.covariates(pred)
    stage2 = linsem.fit_ml(spec2, Y=pipe.Y2, Z=Z2, start=start2, compute_inference=sandwich)
    if not stage2.converged:
        raise ConvergenceError("stage-2 fit did not converge")
    psi_labels = spec2.psi_labels
    keep = [j for j, lab in enumerate(spec2.layout.labels) if lab not in psi_labels]
    labels = tuple(spec2.layout.labels[j] for j in keep)
    lat_col = mom.column(basis.latent)[0]
    rng_m = (float(np.min(lat_col)), float(np.max(lat_col)))

    if not sandwich:
        P = len(keep)
        nan = np.full((P, P), np.nan)
        return TwoStageFit(stage1, stage2, spec2, basis, target, names, pred, nan, labels,
                           np.full((len(pred), P), np.nan), np.full((len(pred), P), np.nan),
                           np.full((spec2.n_free, 0), np.nan), rng_m, psi_labels, naive_vcov=nan)
    if3, if2, D = _influence(pipe, stage1, stage2)
    n = len(pred)
    vcov = if3[:, keep].T @ if3[:, keep] / n / n
    naive = if2[:, keep].T @ if2[:, keep] / n / n
    return TwoStageFit(
        stage1=stage1, stage2=stage2, stage2_spec=spec2, basis=basis, target=target,
        prediction_names=names, predictions=pred,
        sandwich_vcov=0.5 * (vcov + vcov.T), sandwich_labels=labels,
        if3=if3[:, keep], if2=if2[:, keep], D=D, latent_mean_range=rng_m,
        psi2_labels=psi_labels, naive_vcov=0.5 * (naive + naive.T),
    )


def _influence(pipe: _Pipeline, stage1, stage2: FitResult, known_theta1: bool = False):
    """Composite influence functions of the stage-2 parameters."""
    theta1 = stage1_theta(stage1)
    theta2 = stage2.theta_hat.values
    n = len(pipe.Y2)
    H2inv = linsem._inverse_information(stage2.information)
    if2 = stage2.score_matrix @ H2inv
    P2, P1 = len(theta2), len(theta1)
    D = np.zeros((P2, P1))
    if not known_theta1:
        for j in range(P1):
            h = max(1e-5, 1e-5 * abs(theta1[j]))
            tp, tm = theta1.copy(), theta1.copy()
            tp[j] += h
            tm[j] -= h
            D[:, j] = (pipe.score_sum(theta2, tp) - pipe.score_sum(theta2, tm)) / (2 * h * n)
    if1 = stage1.influence
    if3 = if2 + if1 @ D.T @ H2inv.T
    return if3, if2, D


def sandwich_variance(fit: TwoStageFit, data=None, known_theta1: bool = False) -> np.ndarray:
    """Two-stage sandwich variance ``(1/n^2) sum IF3 IF3'`` for the non-Psi block.

    With ``known_theta1`` the stage-1 contribution is dropped, giving the
    naive stage-2 sandwich that treats predictions as fixed covariates.
    ``data`` is only needed for the non-default ``known_theta1=False`` path
    when the fit did not retain its stage-1 derivative.
    """
    keep_idx = [fit.stage2_spec.layout.index[l] for l in fit.sandwich_labels]
    if known_theta1:
        IF = fit.if2
    elif data is not None:
        pipe = _Pipeline(fit.stage1, fit.basis, as_frame(data), fit.stage2_spec, fit.prediction_names)
        IF = _influence(pipe, fit.stage1, fit.stage2)[0][:, keep_idx]
    else:
        IF = fit.if3
    n = len(IF)
    V = IF.T @ IF / n / n
    return 0.5 * (V + V.T)


# ------------------------------------------------------------------ curves
def predict_curve(fit: TwoStageFit, grid, z_row: Mapping | None = None, level: float = 0.95) -> pd.DataFrame:
    """Fitted structural curve ``alpha + B phi(xi) + Gamma z`` with pointwise bands.

    Parameters
    ----------
    grid : array-like
        Latent values (one column per latent for interaction bases).
    z_row : mapping, optional
        Values of the non-prediction covariates of the target equation;
        missing entries are taken as 0.

    Returns
    -------
    DataFrame
        Columns ``xi``, ``estimate``, ``se``, ``lower``, ``upper`` and
        ``extrapolated`` (outside the range of the stage-1 predicted means
        or the spline knots).
    """
    grid = np.asarray(grid, dtype=float)
    Phi = fit.basis.evaluate(grid)
    spec = fit.stage2_spec
    est = fit.estimates
    idx = {lab: k for k, lab in enumerate(fit.sandwich_labels)}
    z_row = dict(z_row or {})
    G = np.zeros((len(Phi), len(idx)))
    value = np.zeros(len(Phi))

    def add(constraint, x):
        nonlocal value
        if isinstance(constraint, Free):
            value = value + est[constraint.label] * x
            G[:, idx[constraint.label]] += x
        else:
            value = value + constraint.value * x

    icpt = dict(spec.intercepts)
    if fit.target in icpt:
        add(icpt[fit.target], np.ones(len(Phi)))
    names = list(fit.prediction_names)
    for t, s, c in spec.regressions:
        if t != fit.target or s in spec.latents:
            continue
        if s in names:
            add(c, Phi[:, names.index(s)])
        elif s in spec.covariates:
            add(c, np.full(len(Phi), float(z_row.get(s, 0.0))))
    se = np.sqrt(np.clip(np.einsum("ij,jk,ik->i", G, fit.sandwich_vcov, G), 0, None))
    q = stats.norm.ppf(0.5 + level / 2)
    lo, hi = fit.latent_mean_range
    if isinstance(fit.basis, NaturalSpline) and fit.basis.knots is not None:
        lo, hi = fit.basis.knots[0], fit.basis.knots[-1]
    g1 = grid if grid.ndim == 1 else grid[:, 0]
    return pd.DataFrame({
        "xi": g1, "estimate": value, "se": se,
        "lower": value - q * se, "upper": value + q * se,
        "extrapolated": (g1 < lo) | (g1 > hi),
    })


# ------------------------------------------------------- outcome prediction
def predict_outcome(fit: TwoStageFit, data) -> np.ndarray:
    """``E[Y | X, Z]`` of the stage-2 indicators under the fitted model."""
    from .linsem import implied_moments

    frame = as_frame(data)
    pred = predict(fit.stage1, fit.basis, frame).values
    other = [c for c in fit.stage2_spec.covariates if c not in fit.prediction_names]
    cols = dict(zip(other, check_columns(frame, other)[0].T)) if other else {}
    cols.update(zip(fit.prediction_names, pred.T))
    Z2 = np.column_stack([cols[c] for c in fit.stage2_spec.covariates])
    return implied_moments(fit.stage2_spec, fit.stage2.theta_hat, Z2).mean


# ------------------------------------------------------ cross-validation
@dataclass
class CVReport:
    """Outcome of :func:`twostage_cv`."""

    aic: dict
    selected_K: int
    rmse: dict
    selected_df: int
    knots: tuple | None
    folds: int
    reps: int
    fit: TwoStageFit | None = None

    def summary(self) -> str:
        bar = "_" * 70
        lines = [bar, f"Selected mixture model: {self.selected_K} component"
                 + ("s" if self.selected_K != 1 else "")]
        lines.append(f"{'':6}{'AIC':>14}")
        for k, a in self.aic.items():
            lines.append(f"{k:<6}{a:14.3f}")
        lines.append(bar)
        lines.append(f"Selected spline model degrees of freedom: {self.selected_df}")
        if self.knots is not None:
            lines.append("Knots: " + " ".join(f"{t:.4g}" for t in self.knots))
        lines.append("")
        lines.append(f"{'':8}RMSE(nfolds={self.folds}, rep={self.reps})")
        for df, r in self.rmse.items():
            lines.append(f"df:{df:<5}{r:22.6f}")
        lines.append(bar)
        return "\n".join(lines)


def _basis_for_df(df: int, latent=None) -> NonlinearBasis:
    if df < 1:
        raise SpecError("df must be >= 1")
    return Linear(latent) if df == 1 else NaturalSpline.from_df(df, latent)


def twostage_cv(
    stage1_spec: SemSpec,
    stage2_spec: SemSpec,
    data,
    df_grid: Sequence[int] = (1, 2, 3, 4, 5, 6),
    nmix_grid: Sequence[int] = (1,),
    folds: int = 5,
    reps: int = 1,
    seed: int = 0,
    *,
    target: str | None = None,
    restarts: int = 5,
    fit_final: bool = True,
    missing: str = "raise",
) -> CVReport:
    """Select the mixture size by AIC and the spline df by K-fold CV.

    The stage-2 indicators are standardized over the full sample.  For each
    fold the stage-1 model is fitted on the training rows; every df in
    ``df_grid`` then defines a basis (``df = 1`` linear, otherwise a natural
    spline with ``df + 1`` equidistant knots over the training predicted
    means) and the held-out RMSE of ``E[Y | X, Z]`` is averaged over folds
    and repetitions.  Ties within ``1e-6`` go to the smallest df.
    """
    if folds < 2:
        raise SpecError("folds must be >= 2")
    df_grid = [int(d) for d in df_grid]
    if not df_grid or min(df_grid) < 1:
        raise SpecError("df_grid entries must be >= 1")
    target = target or stage2_spec.latents[0]
    cols = list(dict.fromkeys(
        list(stage1_spec.observed) + list(stage1_spec.covariates)
        + list(stage2_spec.observed) + list(stage2_spec.covariates)))
    frame = _complete_frame(data, cols, missing).copy()
    ycols = list(stage2_spec.observed)
    frame[ycols] = (frame[ycols] - frame[ycols].mean()) / frame[ycols].std(ddof=1)

    aic = {}
    for K in nmix_grid:
        st1 = fit_stage1(stage1_spec, frame, None if K == 1 else K, restarts, seed, compute_inference=False)
        aic[int(K)] = float(st1.aic)
    best_K = min(aic, key=lambda k: (aic[k], k))
    mixK = None if best_K == 1 else best_K

    n = len(frame)
    if n // folds < 2:
        raise SpecError("folds too small to fit")
    errs = {df: [] for df in df_grid}
    rng = np.random.default_rng(seed)
    latent = None
    for rep in range(reps):
        perm = rng.permutation(n)
        parts = np.array_split(perm, folds)
        for f in range(folds):
            test_idx = np.sort(parts[f])
            train_idx = np.sort(np.concatenate([parts[g] for g in range(folds) if g != f]))
            train = frame.iloc[train_idx].reset_index(drop=True)
            test = frame.iloc[test_idx].reset_index(drop=True)
            if len(train) <= stage1_spec.n_free + 1:
                raise SpecError("fold too small to fit")
            st1 = fit_stage1(stage1_spec, train, mixK, restarts, seed, compute_inference=False)
            for df in df_grid:
                fit = twostage_fit(stage1_spec, stage2_spec, _basis_for_df(df, latent), train,
                                   target=target, stage1=st1, sandwich=False)
                yhat = predict_outcome(fit, test)
                resid = test[ycols].to_numpy(float) - yhat
                errs[df].append(float(np.sqrt(np.mean(resid**2))))
    rmse = {df: float(np.mean(v)) for df, v in errs.items()}
    best = min(rmse.values())
    selected = min(df for df in df_grid if rmse[df] <= best + 1e-6)
    final = None
    knots = None
    if fit_final:
        final = twostage_fit(stage1_spec, stage2_spec, _basis_for_df(selected), frame,
                             mixture_K=mixK, target=target, restarts=restarts, seed=seed)
        knots = getattr(final.basis, "knots", None)
    return CVReport(aic, best_K, rmse, selected, knots, folds, reps, final)


# -------------------------------------------------------------- estimator
class TwoStageSEM(BaseEstimator):
    """Two-stage estimator for SEMs with a non-linear latent effect.

    Parameters
    ----------
    stage1 : SemSpec
        Measurement model of the latent predictors.
    stage2 : SemSpec
        Model of the outcome block.
    basis : NonlinearBasis, default Linear()
    n_components : int, default 1
        Mixture components for the stage-1 latent law.
    target : str, optional
    restarts, random_state :
        Mixture EM restarts and seed.

    Attributes
    ----------
    result_ : TwoStageFit
    coef_ : dict
        Stage-2 structural coefficients of the prediction columns.
    """

    def __init__(self, stage1=None, stage2=None, basis=None, n_components=1, target=None,
                 restarts=5, random_state=0, missing="raise"):
        self.stage1 = stage1
        self.stage2 = stage2
        self.basis = basis
        self.n_components = n_components
        self.target = target
        self.restarts = restarts
        self.random_state = random_state
        self.missing = missing

    def fit(self, X, y=None):
        if not isinstance(self.stage1, SemSpec) or not isinstance(self.stage2, SemSpec):
            raise SpecError("TwoStageSEM needs stage1 and stage2 SemSpec objects")
        basis = self.basis if self.basis is not None else Linear()
        K = None if self.n_components in (None, 1) else self.n_components
        self.result_ = twostage_fit(self.stage1, self.stage2, basis, X, mixture_K=K,
                                    target=self.target, restarts=self.restarts,
                                    seed=self.random_state, missing=self.missing)
        self.coef_ = {lab: self.result_.coef(lab) for lab in self.result_.structural_labels()}
        return self

    def transform(self, X) -> np.ndarray:
        """Predicted non-linear terms ``E[phi(xi) | X, Z]``."""
        check_is_fitted(self, "result_")
        return predict(self.result_.stage1, self.result_.basis, X).values

    def predict(self, X) -> np.ndarray:
        """``E[Y | X, Z]`` for the stage-2 indicators."""
        check_is_fitted(self, "result_")
        return predict_outcome(self.result_, X)

    def score(self, X, y=None) -> float:
        """Negative RMSE of the stage-2 indicator predictions."""
        check_is_fitted(self, "result_")
        Y = check_columns(X, self.result_.stage2_spec.observed)[0]
        return -float(np.sqrt(np.mean((Y - self.predict(X)) ** 2)))
