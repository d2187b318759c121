"""Forecast metrics, boost percentages, Diebold-Mariano tests and station tallies."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import norm

from .errors import DataError

METCROSS_BETTER = "metcross-better"
BASELINE_BETTER = "baseline-better"
INCONCLUSIVE = "inconclusive"


@dataclass(frozen=True, eq=False)
class Metrics:
    mae_per_station: np.ndarray
    rmse_per_station: np.ndarray

    @property
    def mae(self) -> float:
        return float(self.mae_per_station.mean())

    @property
    def rmse(self) -> float:
        return float(self.rmse_per_station.mean())


def mae_rmse(pred: np.ndarray, actual: np.ndarray) -> Metrics:
    """Per-station MAE/RMSE over time for ``[G, T']`` arrays; means via the properties."""
    pred = np.asarray(pred, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if pred.shape != actual.shape or pred.ndim != 2:
        raise DataError(f"prediction shape {pred.shape} does not match actual {actual.shape}")
    if pred.shape[1] < 1:
        raise DataError("no test periods")
    err = pred - actual
    return Metrics(np.abs(err).mean(axis=1), np.sqrt((err ** 2).mean(axis=1)))


def boost(baseline_metric: float, model_metric: float) -> float:
    """Percentage error reduction of ``model_metric`` relative to ``baseline_metric``."""
    if not baseline_metric > 0:
        raise DataError(f"boost needs a positive baseline metric, got {baseline_metric}")
    return 100.0 * (baseline_metric - model_metric) / baseline_metric


@dataclass(frozen=True)
class DMResult:
    statistic: float
    p_value: float


def _loss(errors: np.ndarray, loss: str) -> np.ndarray:
    if loss == "absolute":
        return np.abs(errors)
    if loss == "squared":
        return errors ** 2
    raise ValueError(f"unknown loss {loss!r}")


def dm_test(errors_a, errors_b, loss: str = "absolute", horizon: int = 1) -> DMResult:
    """Diebold-Mariano test of equal accuracy for two forecast error series.

    The loss differential is ``loss(a) - loss(b)``; its long-run variance uses
    Newey-West (Bartlett) weights with ``horizon - 1`` lags. Negative
    statistics favour ``a``. p-values are two-sided under the normal law.
    """
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DataError("DM test needs two equal-length 1-d error series")
    if a.size < 10:
        raise DataError("DM test needs at least 10 observations")
    if horizon < 1:
        raise DataError("horizon must be >= 1")
    d = _loss(a, loss) - _loss(b, loss)
    if not np.any(d):
        return DMResult(0.0, 1.0)
    n = d.size
    dbar = d.mean()
    dc = d - dbar
    lrv = dc @ dc / n
    for k in range(1, horizon):
        lrv += 2.0 * (1.0 - k / horizon) * (dc[k:] @ dc[:-k]) / n
    if lrv <= 0:
        return DMResult(math.copysign(math.inf, dbar), 0.0)
    stat = dbar / math.sqrt(lrv / n)
    return DMResult(float(stat), float(2.0 * norm.sf(abs(stat))))


def classify_dm(result: DMResult, alpha: float = 0.05) -> str:
    if result.p_value < alpha and result.statistic < 0:
        return METCROSS_BETTER
    if result.p_value < alpha and result.statistic > 0:
        return BASELINE_BETTER
    return INCONCLUSIVE


def dm_grid(metcross_errors: np.ndarray, baseline_errors: Mapping[str, np.ndarray],
            loss: str = "absolute", horizon: int = 1, alpha: float = 0.05):
    """Per-station trichotomy of METcross against each baseline.

    Error arrays are ``[G, T']``. Returns ``(labels [G, n_baselines], stats, p_values)``
    with columns in the mapping's order.
    """
    m = np.asarray(metcross_errors, dtype=np.float64)
    names = list(baseline_errors)
    G = m.shape[0]
    labels = np.empty((G, len(names)), dtype=object)
    stats = np.zeros((G, len(names)))
    pvals = np.ones((G, len(names)))
    for j, name in enumerate(names):
        b = np.asarray(baseline_errors[name], dtype=np.float64)
        if b.shape != m.shape:
            raise DataError(f"baseline {name!r} errors have shape {b.shape}, expected {m.shape}")
        for g in range(G):
            r = dm_test(m[g], b[g], loss, horizon)
            stats[g, j], pvals[g, j] = r.statistic, r.p_value
            labels[g, j] = classify_dm(r, alpha)
    return labels, stats, pvals


def best_station_counts(per_station: Mapping[str, np.ndarray]) -> dict[str, int]:
    """How many stations each model predicts best; ties go to the first listed model."""
    names = list(per_station)
    if not names:
        return {}
    arrays = [np.asarray(per_station[n], dtype=np.float64) for n in names]
    if any(a.shape != arrays[0].shape or a.ndim != 1 for a in arrays):
        raise DataError("all models must report metrics for the same stations")
    winners = np.argmin(np.stack(arrays), axis=0)
    counts = np.bincount(winners, minlength=len(names))
    return {n: int(c) for n, c in zip(names, counts)}


@dataclass(eq=False)
class ExperimentResult:
    """Metrics of one trained model on one test range."""

    label: str
    model: str
    base_kind: str
    train_days: int
    seed: int
    config_hash: str
    station_ids: Sequence[str]
    metrics: Metrics
    test_range: tuple[str, str] = ("", "")
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "model": self.model,
            "base_kind": self.base_kind,
            "train_days": self.train_days,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "test_range": list(self.test_range),
            "mae": self.metrics.mae,
            "rmse": self.metrics.rmse,
            "station_ids": list(self.station_ids),
            "mae_per_station": [float(x) for x in self.metrics.mae_per_station],
            "rmse_per_station": [float(x) for x in self.metrics.rmse_per_station],
            **self.extra,
        }
