"""Windowed conformal prediction intervals around one-step point forecasts.

Nonconformity scores are absolute residuals divided by an uncertainty
model (UM).  The default UM is the rolling mean absolute residual of the
forecaster; scores and residuals both update online through the test
period, so each interval only uses information from strictly earlier steps.
"""

from __future__ import annotations

import csv
import io
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .series import SplitSpec, TimeSeries, lag_matrix, split_bounds

UM_KINDS = ("rolling_abs_residual", "constant")


class ConformalError(ValueError):
    pass


@dataclass(frozen=True)
class ConformalConfig:
    delta: float = 0.1
    window: int = 100
    uncertainty_model: str = "rolling_abs_residual"
    um_width: int = 20
    um_floor: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ConformalError(f"delta must lie in (0, 1), got {self.delta}")
        if self.window < 1:
            raise ConformalError("window must be >= 1")
        if self.uncertainty_model not in UM_KINDS:
            raise ConformalError(f"uncertainty_model must be one of {UM_KINDS}")
        if self.um_width < 1:
            raise ConformalError("um_width must be >= 1")

    @property
    def coverage_target(self) -> float:
        return 1.0 - self.delta


@dataclass(frozen=True)
class IntervalForecast:
    point: float
    lower: float
    upper: float
    quantile: float
    um_value: float

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def covers(self, y: float) -> bool:
        return self.lower <= y <= self.upper


class RollingAbsResidual:
    """Mean absolute residual over the last ``width`` observations, floored."""

    def __init__(self, width: int = 20, floor: float = 1e-8, history=()):
        self._buf = deque((abs(float(r)) for r in history), maxlen=width)
        self.floor = floor

    def value(self) -> float:
        if not self._buf:
            return 1.0
        return max(sum(self._buf) / len(self._buf), self.floor)

    def update(self, residual: float) -> None:
        self._buf.append(abs(float(residual)))


class ConstantUM:
    def value(self) -> float:
        return 1.0

    def update(self, residual: float) -> None:
        pass


def make_um(config: ConformalConfig, history=()):
    if config.uncertainty_model == "constant":
        return ConstantUM()
    return RollingAbsResidual(config.um_width, config.um_floor, history)


def conformal_score(actual: float, point: float, um: float) -> float:
    if not um > 0:
        raise ConformalError(f"uncertainty model value must be positive, got {um}")
    return abs(actual - point) / um


def conformal_quantile(scores, config: ConformalConfig) -> float:
    """Finite-sample-corrected (1 - delta) quantile of the last ``window`` scores."""
    s = list(scores)[-config.window:]
    n = len(s)
    if n == 0:
        raise ConformalError("no conformal scores available in the window")
    # small slack so e.g. 0.9 * 10 does not round up to 10
    rank = min(math.ceil((1.0 - config.delta) * (n + 1) - 1e-9), n)
    return float(sorted(s)[rank - 1])


def predict_interval(forecaster, um_model, lags, scores, config: ConformalConfig) -> IntervalForecast:
    """Interval for a single step from its lag vector and the score history."""
    point = float(np.asarray(forecaster.predict(np.atleast_2d(lags)), dtype=float)[0])
    um = um_model.value()
    cq = conformal_quantile(scores, config)
    half = cq * um
    return IntervalForecast(point, point - half, point + half, cq, um)


@dataclass
class ConformalRun:
    config: ConformalConfig
    start: int
    actual: np.ndarray
    intervals: list = field(default_factory=list)
    n_calibration: int = 0

    @property
    def covered(self) -> np.ndarray:
        return np.array([iv.covers(y) for iv, y in zip(self.intervals, self.actual)], dtype=bool)

    @property
    def coverage(self) -> float:
        return float(self.covered.mean())

    @property
    def widths(self) -> np.ndarray:
        return np.array([iv.width for iv in self.intervals])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# target coverage {self.config.coverage_target * 100:g}% (delta={self.config.delta:g})\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "point", "lower", "upper", "actual", "covered"])
        for i, (iv, y) in enumerate(zip(self.intervals, self.actual)):
            w.writerow([self.start + i, repr(iv.point), repr(iv.lower), repr(iv.upper), repr(float(y)), int(iv.covers(y))])
        return buf.getvalue()


def run_conformal(forecaster, series: TimeSeries, split: SplitSpec, config: ConformalConfig | None = None,
                  p: int | None = None) -> ConformalRun:
    """Calibrate on the calibration slice, then emit online intervals over the test slice.

    The UM is warmed up with in-sample residuals from the tail of the
    training segment so the first calibration score already has a scale.
    """
    config = config or ConformalConfig()
    p = p if p is not None else forecaster.lag_count
    if split.total != len(series):
        raise ConformalError(f"split covers {split.total} points, series has {len(series)}")
    b = split_bounds(split)
    c_lo, c_hi = b["calibration"]
    t_lo, t_hi = b["test"]
    if c_hi - c_lo < 1:
        raise ConformalError("calibration slice is empty")
    if t_hi - t_lo < 1:
        raise ConformalError("test slice is empty")
    y = series.values

    warm_lo = max(p, c_lo - config.um_width)
    if c_lo - warm_lo > 0:
        warm = y[warm_lo:c_lo] - forecaster.predict(lag_matrix(y[warm_lo - p:c_lo], p))
    else:
        warm = ()
    um = make_um(config, warm)

    if c_lo < p:
        raise ConformalError(f"{p} lags need {p} observations before the calibration slice")
    scores = []
    cal_pred = forecaster.predict(lag_matrix(y[c_lo - p:c_hi], p))
    for yt, pt in zip(y[c_lo:c_hi], cal_pred):
        scores.append(conformal_score(yt, pt, um.value()))
        um.update(yt - pt)

    run = ConformalRun(config, t_lo, y[t_lo:t_hi].copy(), n_calibration=len(scores))
    X = lag_matrix(y[t_lo - p:t_hi], p)
    for row, yt in zip(X, run.actual):
        iv = predict_interval(forecaster, um, row, scores, config)
        run.intervals.append(iv)
        scores.append(conformal_score(yt, iv.point, iv.um_value))
        um.update(yt - iv.point)
    return run
