"""Two-stage least squares on reference-indicator equations.

Replacing each latent by its reference indicator turns the structural
equation into an observed-variable regression whose regressors are
correlated with the error; the remaining indicators (and their
transformations for non-linear terms) serve as instruments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from ._validation import check_columns, check_is_fitted
from .exceptions import NumericalError, SpecError


@dataclass
class IvFit:
    """2SLS estimates.

    Attributes
    ----------
    coefficients : ndarray (k,)
    classic_vcov : ndarray (k, k)
        ``sigma2 (Xhat' Xhat)^-1`` with ``sigma2 = sum(u^2) / n``.
    robust_vcov : ndarray (k, k)
        ``(Xhat' Xhat)^-1 Xhat' diag(u^2) Xhat (Xhat' Xhat)^-1``.
    residuals : ndarray (n,)
        ``y - X b`` using the actual (not first-stage fitted) regressors.
    first_stage : ndarray (m, k)
        Coefficients of each regressor on the instruments.
    """

    coefficients: np.ndarray
    classic_vcov: np.ndarray
    robust_vcov: np.ndarray
    residuals: np.ndarray
    first_stage: np.ndarray
    sigma2: float
    names: tuple = ()
    n_instruments: int = 0

    @property
    def classic_se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.classic_vcov))

    @property
    def robust_se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.robust_vcov))

    def as_dict(self) -> dict:
        return dict(zip(self.names, self.coefficients.tolist()))


def iv_fit(y, regressors, instruments, names=None, rcond: float = 1e-10) -> IvFit:
    """2SLS of ``y`` on ``regressors`` with ``instruments``.

    Both matrices are used as given: exogenous columns (the intercept,
    observed covariates) should appear in both so that they instrument
    themselves.

    Parameters
    ----------
    y : array-like (n,)
    regressors : array-like (n, k)
    instruments : array-like (n, m), m >= k

    Raises
    ------
    SpecError
        Fewer instrument columns than regressors.
    NumericalError
        Rank-deficient instruments or first-stage fitted regressors.
    """
    y = np.asarray(y, dtype=float).ravel()
    X = np.asarray(regressors, dtype=float)
    W = np.asarray(instruments, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    W = W[:, None] if W.ndim == 1 else W
    n, k = X.shape
    if W.shape[0] != n or len(y) != n:
        raise SpecError("y, regressors and instruments must have the same number of rows")
    if W.shape[1] < k:
        raise SpecError(
            f"under-identified: {W.shape[1]} instrument columns for {k} regressors"
        )
    Qw, Rw = np.linalg.qr(W)
    d = np.abs(np.diag(Rw))
    if d.min() <= rcond * d.max():
        raise NumericalError("instrument matrix is rank deficient")
    Xhat = Qw @ (Qw.T @ X)
    Qx, Rx = np.linalg.qr(Xhat)
    d = np.abs(np.diag(Rx))
    if d.min() <= rcond * d.max():
        raise NumericalError("first-stage fitted regressors are rank deficient")
    beta = np.linalg.solve(Rx, Qx.T @ y)
    u = y - X @ beta
    Rinv = np.linalg.inv(Rx)
    bread = Rinv @ Rinv.T  # (Xhat' Xhat)^-1
    sigma2 = float(u @ u / n)
    meat = (Xhat * (u**2)[:, None]).T @ Xhat
    robust = bread @ meat @ bread
    first = np.linalg.solve(Rw, Qw.T @ X)
    names = tuple(names) if names is not None else tuple(f"b{j}" for j in range(k))
    return IvFit(beta, sigma2 * bread, 0.5 * (robust + robust.T), u, first, sigma2,
                 names, W.shape[1])


def polynomial_iv(data, outcome: str, reference: str, instruments, degree: int = 2,
                  covariates=()) -> IvFit:
    """Reference-indicator 2SLS for a polynomial structural equation.

    Regresses ``outcome`` on ``[1, x, ..., x^degree, covariates]`` with
    ``x`` the reference indicator, instrumented by
    ``[1, w, ..., w^degree for each instrument w, covariates]``.

    Examples
    --------
    The quadratic comparator: ``polynomial_iv(d, "y1", "x1", ["x2", "x3"])``.
    """
    cols = [outcome, reference, *instruments, *covariates]
    V, _ = check_columns(data, cols)
    y, x = V[:, 0], V[:, 1]
    Wraw = V[:, 2: 2 + len(instruments)]
    C = V[:, 2 + len(instruments):]
    one = np.ones((len(y), 1))
    X = np.hstack([one] + [x[:, None] ** p for p in range(1, degree + 1)] + [C])
    W = np.hstack([one] + [Wraw**p for p in range(1, degree + 1)] + [C])
    names = ["(Intercept)"] + [reference if p == 1 else f"{reference}^{p}"
                               for p in range(1, degree + 1)] + list(covariates)
    return iv_fit(y, X, W, names=names)


class IV2SLS(BaseEstimator, RegressorMixin):
    """Scikit-learn style 2SLS.

    ``fit(X, y, instruments=W)`` regresses ``y`` on ``X`` (an intercept is
    prepended to both ``X`` and ``W`` when ``fit_intercept``).
    """

    def __init__(self, fit_intercept: bool = True, robust: bool = True):
        self.fit_intercept = fit_intercept
        self.robust = robust

    def _design(self, A):
        A = np.asarray(A, dtype=float)
        A = A[:, None] if A.ndim == 1 else A
        return np.hstack([np.ones((len(A), 1)), A]) if self.fit_intercept else A

    def fit(self, X, y, instruments=None):
        if instruments is None:
            raise SpecError("IV2SLS.fit requires instruments")
        self.result_ = iv_fit(y, self._design(X), self._design(instruments))
        b = self.result_.coefficients
        self.intercept_ = b[0] if self.fit_intercept else 0.0
        self.coef_ = b[1:] if self.fit_intercept else b
        V = self.result_.robust_vcov if self.robust else self.result_.classic_vcov
        self.bse_ = np.sqrt(np.diag(V))
        return self

    def predict(self, X):
        check_is_fitted(self, "result_")
        return self._design(X) @ self.result_.coefficients
