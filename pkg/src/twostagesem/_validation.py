"""Input validation helpers shared by the estimators."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .exceptions import DataError


def as_frame(data) -> pd.DataFrame:
    if isinstance(data, pd.DataFrame):
        return data
    if isinstance(data, Mapping):
        return pd.DataFrame({k: np.asarray(v) for k, v in data.items()})
    raise DataError(
        f"data must be a pandas DataFrame or a mapping of column arrays, got {type(data).__name__}"
    )


def check_columns(data, columns: Sequence[str], missing: str = "raise"):
    """Extract ``columns`` as a float matrix under the complete-case policy.

    Parameters
    ----------
    data : DataFrame or mapping
    columns : sequence of str
    missing : {"raise", "drop"}
        Rows with missing cells raise :class:`DataError` (reporting their
        count) or are dropped.

    Returns
    -------
    values : ndarray, shape (n_complete, len(columns))
    keep : ndarray of bool, shape (n_rows,)
        Row mask of retained rows.
    """
    frame = as_frame(data)
    absent = [c for c in columns if c not in frame.columns]
    if absent:
        raise DataError(f"data is missing required columns: {absent}")
    if not columns:
        return np.empty((len(frame), 0)), np.ones(len(frame), dtype=bool)
    sub = frame.loc[:, list(columns)]
    try:
        values = sub.to_numpy(dtype=float)
    except (TypeError, ValueError) as exc:
        raise DataError(f"non-numeric values in columns {list(columns)}: {exc}") from None
    bad = ~np.isfinite(values).all(axis=1)
    n_bad = int(bad.sum())
    if n_bad:
        if missing == "drop":
            return values[~bad], ~bad
        if missing != "raise":
            raise ValueError(f"missing must be 'raise' or 'drop', got {missing!r}")
        first = np.flatnonzero(bad)[:5].tolist()
        raise DataError(
            f"{n_bad} row(s) contain missing or non-finite values (first rows: {first}); "
            "only complete cases are supported"
        )
    return values, ~bad


def check_is_fitted(estimator, attribute: str):
    if not hasattr(estimator, attribute):
        from sklearn.exceptions import NotFittedError

        raise NotFittedError(
            f"This {type(estimator).__name__} instance is not fitted yet; call 'fit' first."
        )
