"""Multiple comparison with the best: average ranks and a Nemenyi critical distance."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

# Nemenyi critical values q_alpha = studentized range quantile (k groups, inf df) / sqrt(2)
_Q_TABLE = {
    0.05: (1.960, 2.344, 2.569, 2.728, 2.850, 2.948, 3.031, 3.102, 3.164, 3.219,
           3.268, 3.313, 3.354, 3.391, 3.426, 3.458, 3.489, 3.517, 3.544),
    0.10: (1.645, 2.052, 2.291, 2.460, 2.589, 2.693, 2.780, 2.855, 2.920, 2.978,
           3.030, 3.077, 3.120, 3.159, 3.196, 3.230, 3.261, 3.291, 3.319),
}
MAX_TABULATED_K = 20


class McbError(ValueError):
    pass


def critical_value(k: int, alpha_level: float = 0.05) -> float:
    if k < 2:
        raise McbError("need at least 2 models")
    table = _Q_TABLE.get(round(alpha_level, 10))
    if table is not None and k <= MAX_TABULATED_K:
        return table[k - 2]
    # outside the shipped table; fall back to the exact quantile
    from scipy.stats import studentized_range

    return float(studentized_range.ppf(1.0 - alpha_level, k, np.inf) / math.sqrt(2.0))


def critical_distance(k: int, n: int, alpha_level: float = 0.05) -> float:
    return critical_value(k, alpha_level) * math.sqrt(k * (k + 1) / (12.0 * n))


@dataclass(frozen=True)
class RankTable:
    models: tuple
    avg_rank: np.ndarray
    cd: float
    n_datasets: int
    alpha_level: float = 0.05

    @property
    def k(self) -> int:
        return len(self.models)

    @property
    def lower(self) -> np.ndarray:
        return self.avg_rank - self.cd / 2.0

    @property
    def upper(self) -> np.ndarray:
        return self.avg_rank + self.cd / 2.0

    @property
    def best(self) -> str:
        return self.models[int(np.argmin(self.avg_rank))]

    def inferior(self) -> list:
        """Models whose interval lies entirely above the best model's interval."""
        b = int(np.argmin(self.avg_rank))
        return [m for i, m in enumerate(self.models) if self.lower[i] > self.upper[b]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "avg_rank", "lower", "upper"])
        for i in np.argsort(self.avg_rank, kind="stable"):
            w.writerow([self.models[i], f"{self.avg_rank[i]:.6f}", f"{self.lower[i]:.6f}", f"{self.upper[i]:.6f}"])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [
            f"MCB over {self.n_datasets} datasets, {self.k} models, alpha={self.alpha_level:g}, CD={self.cd:.4f}",
        ]
        inferior = set(self.inferior())
        for i in np.argsort(self.avg_rank, kind="stable"):
            m = self.models[i]
            tag = " (best)" if m == self.best else " (significantly inferior)" if m in inferior else ""
            lines.append(f"  {m:<16} {self.avg_rank[i]:6.3f}  [{self.lower[i]:.3f}, {self.upper[i]:.3f}]{tag}")
        return "\n".join(lines) + "\n"


def rank_rows(scores) -> np.ndarray:
    """Rank each row (lower score = rank 1), averaging ties."""
    return np.apply_along_axis(rankdata, 1, np.asarray(scores, dtype=float))


def mcb_test(scores, alpha_level: float = 0.05, models=None) -> RankTable:
    """Rank ``k`` models over ``N`` datasets from an ``N x k`` score matrix."""
    s = np.asarray(scores, dtype=float)
    if s.ndim != 2:
        raise McbError("scores must be a 2-D (datasets x models) matrix")
    n, k = s.shape
    if n < 2 or k < 2:
        raise McbError(f"need N >= 2 datasets and k >= 2 models, got N={n}, k={k}")
    if np.isnan(s).any():
        r, c = np.argwhere(np.isnan(s))[0]
        raise McbError(f"NaN score at dataset {r}, model {c}")
    if models is None:
        models = tuple(f"m{i}" for i in range(k))
    if len(models) != k:
        raise McbError(f"{len(models)} model names for {k} columns")
    avg = rank_rows(s).mean(axis=0)
    return RankTable(tuple(models), avg, critical_distance(k, n, alpha_level), n, alpha_level)
