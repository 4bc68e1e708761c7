"""Lookback forecasting baselines.

These are pure functions of the raw visit matrix: no model code, no
normalization.  Windows without enough history are skipped and counted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

WEEK_HOURS = 168
HISTORY_WEEKS = 4


def _visits_of(ds) -> np.ndarray:
    return np.asarray(getattr(ds, "visits", ds), dtype=np.float64)


def naive_seasonal(ds, t: int, horizon: int) -> np.ndarray:
    """Forecast hours t..t+H-1 with the values from one week earlier."""
    visits = _visits_of(ds)
    if t - WEEK_HOURS < 0:
        raise ConfigurationError(f"hour {t}: needs {WEEK_HOURS} hours of history")
    if t + horizon - WEEK_HOURS > visits.shape[1]:
        raise ConfigurationError("lookback window extends past the dataset")
    return visits[:, t - WEEK_HOURS:t - WEEK_HOURS + horizon].copy()


def historical_average(ds, t: int, horizon: int) -> np.ndarray:
    """Forecast with the mean of the 4 previous same-weekday/same-hour values."""
    visits = _visits_of(ds)
    if t - HISTORY_WEEKS * WEEK_HOURS < 0:
        raise ConfigurationError(
            f"hour {t}: needs {HISTORY_WEEKS * WEEK_HOURS} hours of history")
    stacked = np.stack([visits[:, t - k * WEEK_HOURS:t - k * WEEK_HOURS + horizon]
                        for k in range(1, HISTORY_WEEKS + 1)])
    return stacked.mean(axis=0)


BASELINES = {
    "naive_seasonal": (naive_seasonal, WEEK_HOURS),
    "historical_average": (historical_average, HISTORY_WEEKS * WEEK_HOURS),
}


@dataclass
class BaselineForecasts:
    method: str
    predictions: np.ndarray      # (W_used, N, H)
    used_starts: np.ndarray      # global input-window starts that had history
    skipped: int


def evaluate_baseline(ds, starts, window: int, horizon: int,
                      method: str) -> BaselineForecasts:
    """Forecast each window whose first target hour has enough history."""
    if method not in BASELINES:
        raise ConfigurationError(f"unknown baseline {method!r}; options: {list(BASELINES)}")
    fn, need = BASELINES[method]
    visits = _visits_of(ds)
    preds, used = [], []
    skipped = 0
    for s in np.asarray(starts, dtype=int):
        t = s + window
        if t - need < 0 or t + horizon > visits.shape[1]:
            skipped += 1
            continue
        preds.append(fn(visits, t, horizon))
        used.append(s)
    predictions = (np.stack(preds) if preds
                   else np.zeros((0, visits.shape[0], horizon)))
    return BaselineForecasts(method=method, predictions=predictions,
                             used_starts=np.asarray(used, dtype=int), skipped=skipped)
