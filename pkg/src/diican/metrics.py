"""Regression metrics: MAE, MAPE, RMSE and R^2."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import LengthMismatch, ZeroDenominator, ZeroObservedValue


class Metrics(NamedTuple):
    mae: float
    mape: float
    rmse: float
    r2: float


def r2_score(y, y_hat, conventional: bool = False) -> float:
    """Coefficient of determination.

    By default the denominator is ``sum((y_hat - mean(y))**2)``, i.e. the
    spread of the *estimates* around the observed mean. ``conventional=True``
    uses the usual total sum of squares ``sum((y - mean(y))**2)``.
    """
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    ref = y if conventional else y_hat
    denom = np.sum((ref - y.mean()) ** 2)
    if denom == 0:
        raise ZeroDenominator("R^2 denominator is zero")
    return float(1.0 - np.sum((y - y_hat) ** 2) / denom)


def evaluate_metrics(y, y_hat, conventional_r2: bool = False, mape_mask=None) -> Metrics:
    """MAE, MAPE, RMSE and R^2 of estimates ``y_hat`` against observations ``y``.

    ``mape_mask`` restricts MAPE to the selected points (the other metrics
    always use every point); MAPE is ``nan`` when the mask selects nothing.
    """
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if len(y) != len(y_hat) or len(y) == 0:
        raise LengthMismatch(f"{len(y)} observations vs {len(y_hat)} estimates")
    err = y - y_hat
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err ** 2)))
    sel = np.ones(len(y), bool) if mape_mask is None else np.asarray(mape_mask, bool)
    if not sel.any():
        mape = float("nan")
    else:
        if np.any(y[sel] == 0):
            raise ZeroObservedValue("MAPE undefined: an observed value is zero")
        mape = float(np.mean(np.abs(err[sel]) / np.abs(y[sel])))
    return Metrics(mae, mape, rmse, r2_score(y, y_hat, conventional_r2))
