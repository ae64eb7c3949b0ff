"""Error metrics and multi-seed aggregation.

MAPE is undefined where the true value is zero, so it is computed only
over indices with y_i >= mape_floor (default 1.0 rider/day) and the
number of excluded indices is reported alongside.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import AllExcludedFromMAPE, LengthMismatch


@dataclass(frozen=True)
class Metrics:
    mse: float
    rmse: float
    mae: float
    mape_pct: float
    mape_excluded: int
    n: int

    def to_dict(self) -> dict:
        return {
            "mse": self.mse,
            "rmse": self.rmse,
            "mae": self.mae,
            "mape_pct": self.mape_pct,
            "mape_excluded": self.mape_excluded,
            "n": self.n,
        }


def compute_metrics(y: np.ndarray, y_hat: np.ndarray,
                    mape_floor: float = 1.0) -> Metrics:
    """MSE, RMSE (= sqrt(MSE) exactly), MAE, and floor-filtered MAPE."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    if y.shape != y_hat.shape or y.shape[0] < 1:
        raise LengthMismatch(f"y has shape {y.shape}, y_hat has {y_hat.shape}")
    err = y - y_hat
    mse = float(np.mean(err * err))
    mae = float(np.mean(np.abs(err)))
    mask = y >= mape_floor
    if not mask.any():
        raise AllExcludedFromMAPE(
            f"no target reaches the MAPE floor {mape_floor}"
        )
    mape = float(100.0 * np.mean(np.abs(err[mask]) / y[mask]))
    return Metrics(
        mse=mse,
        rmse=math.sqrt(mse),
        mae=mae,
        mape_pct=mape,
        mape_excluded=int((~mask).sum()),
        n=y.shape[0],
    )


def aggregate(values) -> dict:
    """Mean and (population) standard deviation of per-seed values."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise LengthMismatch("nothing to aggregate")
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": int(arr.size)}


def bootstrap_mean_ci(values, n_boot: int = 2000, alpha: float = 0.05,
                      seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap confidence interval for the mean."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise LengthMismatch("nothing to bootstrap")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, arr.size, size=(n_boot, arr.size))
    means = arr[idx].mean(axis=1)
    lo = float(np.quantile(means, alpha / 2))
    hi = float(np.quantile(means, 1 - alpha / 2))
    return lo, hi
