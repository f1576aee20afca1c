"""Cross-product benchmark over attractors, models and lag counts.

Each (system, model, lags) cell is independent; its seed is derived from the
root seed and the cell key, so results do not depend on scheduling order.
Rows are written as ``system,model,lags,metric,value,status`` and a rerun
skips cells already present in the output file.
"""

from __future__ import annotations

import csv
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import dynsys
from .metrics import rolling_one_step
from .models import fit_forecaster
from .series import SplitSpec

METRICS = ("smape", "rmse", "mae", "marre")
FIELDS = ("system", "model", "lags", "metric", "value", "status")


@dataclass(frozen=True)
class BenchSettings:
    n_points: int = 1200
    train_len: int = 1000
    seed: int = 0
    scale: bool = True
    model_options: tuple = ()  # ((model, ((key, value), ...)), ...)

    @property
    def test_len(self) -> int:
        return self.n_points - self.train_len

    def options_for(self, model: str) -> dict:
        return dict(dict(self.model_options).get(model, ()))


def component_seed(root: int, *parts) -> int:
    """Child seed of ``root`` for a named component; stable across runs and platforms."""
    key = "|".join(str(p) for p in parts).encode()
    return int(np.random.SeedSequence([root, zlib.crc32(key)]).generate_state(1)[0])


def cell_seed(root: int, system: str, model: str, lags: int) -> int:
    return component_seed(root, "model", system, model, lags)


def simulate_series(system, settings: BenchSettings, n_points: int | None = None):
    """Simulate a built-in (name) or loaded (``OdeSystem``) attractor for the given root seed."""
    sys_ = dynsys.get_system(system) if isinstance(system, str) else system
    cfg = dynsys.SimulationConfig(n_points=n_points or settings.n_points,
                                  seed=component_seed(settings.seed, "simulate", dynsys.system_key(sys_.name)))
    return dynsys.integrate_rk4(sys_, cfg)


def run_cell(system: str, model: str, lags: int, settings: BenchSettings) -> list[dict]:
    """Fit and evaluate one cell; failures become status rows instead of exceptions."""
    base = {"system": system, "model": model, "lags": lags}
    try:
        series = simulate_series(system, settings)
        split = SplitSpec(settings.train_len, 0, settings.test_len)
        fc = fit_forecaster(model, series.values[: settings.train_len], lags,
                            seed=cell_seed(settings.seed, system, model, lags),
                            scale=settings.scale, **settings.options_for(model))
        rep = rolling_one_step(fc, series, split, lags)
    except Exception as err:  # noqa: BLE001 - recorded per row, run continues
        msg = f"error: {type(err).__name__}: {err}".replace("\n", " ")
        return [dict(base, metric=m, value="nan", status=msg) for m in METRICS]
    return [dict(base, metric=m, value=repr(float(getattr(rep.metrics, m))), status="ok") for m in METRICS]


def _run_cell_args(args):
    return run_cell(*args)


def read_scores(path) -> list[dict]:
    if not os.path.exists(path):
        return []
    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(fh)]
    for r in rows:
        r["lags"] = int(r["lags"])
    return rows


def _sort_key(row):
    return (row["system"], row["model"], int(row["lags"]), METRICS.index(row["metric"]))


def write_scores(path, rows) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=FIELDS, lineterminator="\n")
        w.writeheader()
        for r in sorted(rows, key=_sort_key):
            w.writerow({k: r[k] for k in FIELDS})
    os.replace(tmp, path)


def run_benchmark(systems, models, lags, out_path, settings: BenchSettings | None = None,
                  workers: int = 1, progress=None) -> list[dict]:
    """Run every missing cell of the cross product and return all rows, sorted."""
    settings = settings or BenchSettings()
    rows = read_scores(out_path)
    done = {(r["system"], r["model"], r["lags"]) for r in rows if r.get("status") == "ok"}
    rows = [r for r in rows if (r["system"], r["model"], r["lags"]) in done]
    todo = [(s, m, p, settings) for s in systems for m in models for p in sorted(set(lags))
            if (s, m, p) not in done]

    def collect(cell_rows):
        rows.extend(cell_rows)
        # checkpoint after each cell so an interrupted run can resume
        write_scores(out_path, rows)
        if progress is not None:
            r = cell_rows[0]
            progress(f"{r['system']} {r['model']} p={r['lags']}: {cell_rows[0]['status']}")

    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for cell_rows in pool.map(_run_cell_args, todo):
                collect(cell_rows)
    else:
        for args in todo:
            collect(run_cell(*args))
    write_scores(out_path, rows)
    return sorted(rows, key=_sort_key)


def score_matrix(rows, metric: str, lags: int | None = None):
    """Pivot benchmark rows into (datasets, models, N x k matrix).

    A dataset is a (system, lags) pair; datasets missing any model are dropped.
    """
    cells = {}
    for r in rows:
        if r["metric"] != metric or (lags is not None and int(r["lags"]) != lags):
            continue
        cells.setdefault((r["system"], int(r["lags"])), {})[r["model"]] = float(r["value"])
    models = sorted({m for v in cells.values() for m in v})
    datasets = sorted(k for k, v in cells.items()
                      if len(v) == len(models) and all(np.isfinite(x) for x in v.values()))
    mat = np.array([[cells[d][m] for m in models] for d in datasets], dtype=float).reshape(len(datasets), len(models))
    return datasets, models, mat
