"""Simulation scenarios and the Monte Carlo harness.

Data follow

    xi  = gamma1 Z + zeta_t,              X_j = xi  + eps_t_j,  j = 1..3
    eta = beta0 + beta' phi(xi) + gamma2 Z + zeta,   Y_j = eta + eps_j

with ``Z ~ N(0, 1)`` and mutually independent residuals whose laws are set
per scenario.
"""

from __future__ import annotations

import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np
import pandas as pd
from threadpoolctl import threadpool_limits

from .exceptions import SemError, SpecError
from .iv2sls import polynomial_iv
from .model import SemSpec
from .predict import Exponential, NonlinearBasis, Polynomial
from .twostage import twostage_fit

Z95 = 1.96


# --------------------------------------------------------------- residuals
@dataclass(frozen=True)
class Normal:
    var: float = 1.0

    def sample(self, rng, size):
        return rng.normal(0.0, np.sqrt(self.var), size)

    @property
    def mean(self):
        return 0.0


@dataclass(frozen=True)
class Uniform:
    """Zero-mean uniform with variance ``scale**2`` (support ``+/- scale sqrt(12)/2``)."""

    scale: float = 1.0

    def sample(self, rng, size):
        half = self.scale * np.sqrt(12.0) / 2.0
        return rng.uniform(-half, half, size)

    @property
    def mean(self):
        return 0.0

    @property
    def var(self):
        return self.scale**2


@dataclass(frozen=True)
class GaussianMixture:
    """``pi N(mu1, var) + (1 - pi) N(mu2, var)``."""

    pi: float = 0.25
    mu1: float = 0.0
    mu2: float = 3.0
    var: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.pi < 1.0:
            raise SpecError("mixture proportion must lie in (0, 1)")

    def sample(self, rng, size):
        g = rng.random(size) < self.pi
        return np.where(g, self.mu1, self.mu2) + rng.normal(0.0, np.sqrt(self.var), size)

    @property
    def mean(self):
        return self.pi * self.mu1 + (1 - self.pi) * self.mu2


# ---------------------------------------------------------------- scenario
@dataclass(frozen=True)
class Scenario:
    """Simulation design.

    ``phi`` is ``"quadratic"`` (``xi, xi^2``) or ``"exponential"``
    (``xi, exp(xi)``); ``beta`` holds the coefficients of those columns.
    """

    name: str = "custom"
    n: int = 1000
    gamma1: float = 0.0
    gamma2: float = 0.0
    beta0: float = 1.0
    beta: tuple = (1.0, 0.5)
    phi: str = "quadratic"
    zeta_tilde: object = Normal()
    zeta: object = Normal()
    eps_tilde: object = Normal()
    eps: object = Normal()
    seed: int = 0

    def __post_init__(self):
        if self.phi not in ("quadratic", "exponential"):
            raise SpecError(f"unknown phi {self.phi!r}")
        if len(self.beta) != 2:
            raise SpecError("beta must have two entries")
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))

    @property
    def has_covariate(self) -> bool:
        return self.gamma1 != 0.0 or self.gamma2 != 0.0

    def phi_values(self, xi):
        second = xi**2 if self.phi == "quadratic" else np.exp(xi)
        return np.column_stack([xi, second])

    def basis(self) -> NonlinearBasis:
        return Polynomial(2) if self.phi == "quadratic" else Exponential(1.0)

    @property
    def truth(self) -> dict:
        return {"beta1": self.beta[0], "beta2": self.beta[1]}


def generate(scenario: Scenario, seed=None, include_latent: bool = False) -> pd.DataFrame:
    """Draw one dataset with columns ``z, x1..x3, y1..y3`` (and ``xi, eta``).

    ``seed`` (an int, SeedSequence or Generator) overrides ``scenario.seed``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(
        scenario.seed if seed is None else seed)
    n = scenario.n
    z = rng.normal(size=n)
    xi = scenario.gamma1 * z + scenario.zeta_tilde.sample(rng, n)
    xs = xi[:, None] + scenario.eps_tilde.sample(rng, (n, 3))
    b = np.asarray(scenario.beta)
    eta = scenario.beta0 + scenario.phi_values(xi) @ b + scenario.gamma2 * z + scenario.zeta.sample(rng, n)
    ys = eta[:, None] + scenario.eps.sample(rng, (n, 3))
    cols = {"z": z}
    cols.update({f"x{j + 1}": xs[:, j] for j in range(3)})
    cols.update({f"y{j + 1}": ys[:, j] for j in range(3)})
    if include_latent:
        cols["xi"], cols["eta"] = xi, eta
    return pd.DataFrame(cols)


def _catalog() -> dict:
    gmm = GaussianMixture(0.25, 0.0, 3.0, 1.0)
    base = {
        "quadratic-normal": dict(),
        "quadratic-covariate": dict(gamma1=1.0, gamma2=1.0),
        "gmm": dict(zeta_tilde=gmm),
        "gmm-covariate": dict(zeta_tilde=gmm, gamma1=1.0, gamma2=1.0),
        "uniform-zeta": dict(zeta_tilde=Uniform()),
        "uniform-eps": dict(eps_tilde=Uniform()),
        "exponential": dict(phi="exponential", beta0=0.0, beta=(0.0, 0.3)),
    }
    out = {}
    for key, kw in base.items():
        for n in (500, 1000):
            out[f"{key}-n{n}"] = Scenario(name=f"{key}-n{n}", n=n, **kw)
    return out


CATALOG = _catalog()


def get_scenario(name: str, n: int | None = None, seed: int | None = None) -> Scenario:
    """Look up a catalog scenario by full name or by family (then ``n`` is required or 1000)."""
    if name in CATALOG:
        sc = CATALOG[name]
    else:
        fam = f"{name}-n1000"
        if fam not in CATALOG:
            raise SpecError(f"unknown scenario {name!r}; available: {sorted(CATALOG)}")
        sc = CATALOG[fam]
    if n is not None:
        family = sc.name.rsplit("-n", 1)[0]
        sc = replace(sc, n=int(n), name=f"{family}-n{int(n)}")
    if seed is not None:
        sc = replace(sc, seed=int(seed))
    return sc


# -------------------------------------------------------------- estimators
def _specs(covariate: bool):
    cov = ["z"] if covariate else []
    s1 = SemSpec.factor_model({"xi": ["x1", "x2", "x3"]},
                              regressions=[("xi", "z")] if covariate else [], covariates=cov)
    s2 = SemSpec.factor_model({"eta": ["y1", "y2", "y3"]},
                              regressions=[("eta", "z")] if covariate else [], covariates=cov)
    return s1, s2


@dataclass(frozen=True)
class TwoStageEstimator:
    """2SSEM for the simulation model; ``K`` mixture components (``None`` Gaussian)."""

    K: int | None = None
    restarts: int = 5

    def __call__(self, data, scenario: Scenario) -> dict:
        s1, s2 = _specs(scenario.has_covariate)
        fit = twostage_fit(s1, s2, scenario.basis(), data, mixture_K=self.K,
                           restarts=self.restarts, seed=0)
        se = fit.se
        return {f"beta{j + 1}": (fit.coef(lab), se[lab])
                for j, lab in enumerate(fit.structural_labels())}


@dataclass(frozen=True)
class IVEstimator:
    """Reference-indicator 2SLS for the quadratic design."""

    robust: bool = True

    def __call__(self, data, scenario: Scenario) -> dict:
        if scenario.phi != "quadratic":
            raise SpecError("the 2SLS comparator is only defined for the quadratic design")
        cov = ["z"] if scenario.has_covariate else []
        fit = polynomial_iv(data, "y1", "x1", ["x2", "x3"], degree=2, covariates=cov)
        se = fit.robust_se if self.robust else fit.classic_se
        return {"beta1": (fit.coefficients[1], se[1]), "beta2": (fit.coefficients[2], se[2])}


@dataclass(frozen=True)
class TruthEstimator:
    """Returns the true values with zero standard error (a harness check)."""

    def __call__(self, data, scenario):
        return {k: (v, 0.0) for k, v in scenario.truth.items()}


def default_estimators(scenario: Scenario) -> dict:
    est = {"2SSEM": TwoStageEstimator(), "2SSEM mixture": TwoStageEstimator(K=2)}
    if scenario.phi == "quadratic":
        est["2SLS"] = IVEstimator(robust=False)
        est["2SLS robust"] = IVEstimator(robust=True)
    return est


# ------------------------------------------------------------------ report
COLUMNS = ["parameter", "truth", "Mean", "SD", "SE", "SE/SD", "Coverage", "RMSE"]


@dataclass
class MonteCarloReport:
    """Per-parameter summary of one estimator over the replications.

    ``SD`` is the empirical standard deviation with divisor R so that
    ``RMSE^2 = SD^2 + (Mean - truth)^2`` holds exactly.  Coverage is that of
    ``estimate +/- 1.96 SE`` and is reported as NaN (not applicable) when
    every SE is zero.
    """

    estimator: str
    scenario: str
    reps: int
    failures: int
    table: pd.DataFrame
    estimates: np.ndarray = field(default=None, repr=False)
    ses: np.ndarray = field(default=None, repr=False)

    @classmethod
    def from_replications(cls, estimator, scenario, truth: Mapping, results: list):
        params = list(truth)
        ok = [r for r in results if r is not None]
        failures = len(results) - len(ok)
        if not ok:
            raise SemError(f"all {len(results)} replications failed for {estimator}")
        E = np.array([[r[p][0] for p in params] for r in ok], dtype=float)
        S = np.array([[r[p][1] for p in params] for r in ok], dtype=float)
        rows = []
        for j, p in enumerate(params):
            t = float(truth[p])
            e, s = E[:, j], S[:, j]
            mean = float(e.mean())
            sd = float(np.sqrt(np.mean((e - mean) ** 2)))
            se = float(s.mean())
            if np.all(s == 0):
                cover = np.nan
            else:
                cover = float(np.mean(np.abs(e - t) <= Z95 * s))
            ratio = se / sd if sd > 0 else np.nan
            rmse = float(np.sqrt(np.mean((e - t) ** 2)))
            rows.append((p, t, mean, sd, se, ratio, cover, rmse))
        table = pd.DataFrame(rows, columns=COLUMNS)
        return cls(estimator, scenario, len(results), failures, table, E, S)

    def row(self, parameter: str) -> pd.Series:
        return self.table.set_index("parameter").loc[parameter]

    def to_frame(self) -> pd.DataFrame:
        df = self.table.copy()
        df.insert(0, "estimator", self.estimator)
        return df

    def footer(self) -> str:
        return (f"# estimator={self.estimator}; scenario={self.scenario}; reps={self.reps}; "
                f"failures={self.failures} (failed replications excluded)")


def reports_to_csv(reports: Mapping[str, MonteCarloReport]) -> str:
    """CSV table (full float precision) followed by ``#`` footer lines."""
    frame = pd.concat([r.to_frame() for r in reports.values()], ignore_index=True)
    buf = io.StringIO()
    frame.to_csv(buf, index=False, float_format="%.17g", lineterminator="\n")
    for r in reports.values():
        buf.write(r.footer() + "\n")
    return buf.getvalue()


def reports_from_csv(text: str) -> dict:
    """Parse :func:`reports_to_csv` output back into reports (without raw replications)."""
    lines = text.splitlines()
    body = "\n".join(l for l in lines if not l.startswith("#"))
    frame = pd.read_csv(io.StringIO(body), float_precision="round_trip")
    meta = {}
    for l in lines:
        if l.startswith("# estimator="):
            kv = dict(part.strip().split("=", 1) for part in l[2:].split(";"))
            meta[kv["estimator"]] = kv
    out = {}
    for name, sub in frame.groupby("estimator", sort=False):
        kv = meta.get(name, {})
        table = sub.drop(columns="estimator").reset_index(drop=True)
        failures = int(kv.get("failures", "0").split()[0])
        out[name] = MonteCarloReport(name, kv.get("scenario", ""), int(kv.get("reps", 0)),
                                     failures, table)
    return out


# -------------------------------------------------------------------- runner
def _one_rep(scenario, estimators, seed_seq):
    data = generate(scenario, np.random.default_rng(seed_seq))
    out = {}
    for name, est in estimators.items():
        try:
            res = est(data, scenario)
            vals = np.array([v for pair in res.values() for v in pair], dtype=float)
            out[name] = res if np.all(np.isfinite(vals)) else None
        except (SemError, np.linalg.LinAlgError, FloatingPointError):
            out[name] = None
    return out


def run_mc(scenario: Scenario, estimators: Mapping[str, Callable] | None = None, reps: int = 500,
           seed: int | None = None, threads: int = 1,
           progress: Callable | None = None) -> dict:
    """Monte Carlo study of ``estimators`` under ``scenario``.

    Replication ``r`` uses the r-th child of ``SeedSequence(seed)`` (default
    ``scenario.seed``), so results do not depend on ``threads`` or
    scheduling.  Replications where an estimator raises or returns
    non-finite values are excluded from that estimator's summary and
    counted as failures.

    Returns
    -------
    dict
        estimator name -> :class:`MonteCarloReport`.
    """
    if reps < 2:
        raise SpecError("reps must be >= 2")
    estimators = dict(estimators or default_estimators(scenario))
    master = np.random.SeedSequence(scenario.seed if seed is None else seed)
    children = master.spawn(reps)
    results = [None] * reps
    with threadpool_limits(1):
        if threads <= 1:
            for r, ss in enumerate(children):
                results[r] = _one_rep(scenario, estimators, ss)
                if progress:
                    progress(r + 1, reps)
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                futs = [pool.submit(_one_rep, scenario, estimators, ss) for ss in children]
                for r, fut in enumerate(futs):
                    results[r] = fut.result()
                    if progress:
                        progress(r + 1, reps)
    truth = scenario.truth
    return {name: MonteCarloReport.from_replications(name, scenario.name, truth,
                                                     [res[name] for res in results])
            for name in estimators}
