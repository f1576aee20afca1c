"""Point-forecast accuracy metrics and the rolling one-step-ahead harness."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .series import SplitSpec, TimeSeries, lag_matrix, split_bounds


class MetricError(ValueError):
    pass


def _pair(actual, forecast):
    a = np.asarray(actual, dtype=float).reshape(-1)
    f = np.asarray(forecast, dtype=float).reshape(-1)
    if a.size != f.size:
        raise MetricError(f"length mismatch: {a.size} actual vs {f.size} forecast values")
    if a.size == 0:
        raise MetricError("need at least one value")
    return a, f


def smape(actual, forecast) -> float:
    """Symmetric MAPE in percent; terms with ``|y| + |yhat| = 0`` count as 0."""
    a, f = _pair(actual, forecast)
    denom = np.abs(a) + np.abs(f)
    terms = np.divide(2.0 * np.abs(f - a), denom, out=np.zeros_like(a), where=denom > 0)
    return float(terms.mean() * 100.0)


def rmse(actual, forecast) -> float:
    a, f = _pair(actual, forecast)
    e = np.abs(f - a)
    # rescale by the largest error so tiny or huge errors neither underflow nor overflow when squared
    s = e.max()
    if not s > 0 or not np.isfinite(s):
        return float(s)
    return float(s * np.sqrt(np.mean((e / s) ** 2)))


def mae(actual, forecast) -> float:
    a, f = _pair(actual, forecast)
    return float(np.mean(np.abs(f - a)))


def marre(actual, forecast) -> float:
    """Mean absolute range-relative error, multiplied by 100."""
    a, f = _pair(actual, forecast)
    rng = a.max() - a.min()
    if rng == 0:
        raise MetricError("MARRE undefined for a constant actual vector (zero range)")
    # a subnormal range can overflow the ratio; inf is the honest value then
    with np.errstate(over="ignore"):
        return float(np.mean(np.abs((a - f) / rng)) * 100.0)


@dataclass(frozen=True)
class MetricReport:
    smape: float
    rmse: float
    mae: float
    marre: float
    horizon: int

    @classmethod
    def compute(cls, actual, forecast) -> "MetricReport":
        a, f = _pair(actual, forecast)
        try:
            m = marre(a, f)
        except MetricError:
            m = float("nan")
        return cls(smape(a, f), rmse(a, f), mae(a, f), m, a.size)


@dataclass
class ForecastReport:
    model: str
    lags: int
    forecasts: np.ndarray
    actual: np.ndarray
    metrics: MetricReport
    equation: str | None = None

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "lags": self.lags,
            "metrics": asdict(self.metrics),
            "equation": self.equation,
            "forecast": [float(v) for v in self.forecasts],
            "actual": [float(v) for v in self.actual],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=True) + "\n"


def rolling_one_step(model, series: TimeSeries, split: SplitSpec, p: int | None = None, precision: int = 3) -> ForecastReport:
    """One-step-ahead forecasts over the test segment from observed lags.

    The forecast for test index ``t`` sees only ``[y[t-1], ..., y[t-p]]``,
    never ``y[t]`` itself.
    """
    p = p if p is not None else model.lag_count
    if split.total != len(series):
        raise MetricError(f"split covers {split.total} points, series has {len(series)}")
    lo, hi = split_bounds(split)["test"]
    if hi - lo < 1:
        raise MetricError("test segment is empty")
    if lo < p:
        raise MetricError(f"{p} lags need {p} observations before the test segment, only {lo} available")
    values = series.values
    X = lag_matrix(values[lo - p : hi], p)
    forecasts = np.asarray(model.predict(X), dtype=float)
    actual = values[lo:hi].copy()
    return ForecastReport(
        model=getattr(model, "name", type(model).__name__),
        lags=p,
        forecasts=forecasts,
        actual=actual,
        metrics=MetricReport.compute(actual, forecasts),
        equation=model.equation(precision) if hasattr(model, "equation") else None,
    )
