"""Command-line entry point: ``symcast <command> [options]``.

Commands: simulate, fit-eval, benchmark, mcb, conformal. Every command takes
``--config FILE`` (JSON); explicit flags override file values, which override
built-in defaults. The effective configuration is written next to the
outputs as ``config.json``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import benchmark as bm
from . import conformal as cf
from . import dynsys, mcb
from .metrics import rolling_one_step
from .models import MODEL_NAMES, fit_forecaster
from .series import SeriesError, SplitSpec, TimeSeries, load_csv, write_csv

DEFAULTS = {
    "simulate": {"system": "lorenz", "n": 1200, "seed": 0, "out_dir": "out", "systems_file": None,
                 "lyapunov": True, "lyapunov_horizon": 100_000},
    "fit-eval": {"system": None, "csv": None, "column": "value", "n": 1200, "model": "sytf", "lags": 5,
                 "train_len": None, "test_len": 200, "seed": 0, "scale": True, "precision": 3,
                 "options": {}, "out_dir": "out", "systems_file": None},
    "benchmark": {"systems": None, "models": ["sytf", "synf"], "lags": [5], "n": 1200, "train_len": 1000,
                  "seed": 0, "scale": True, "workers": 1, "model_options": {}, "out_dir": "out",
                  "systems_file": None},
    "mcb": {"scores": None, "metric": "rmse", "lags": None, "alpha": 0.05, "out_dir": "out"},
    "conformal": {"system": None, "csv": None, "column": "value", "n": 1200, "model": "sytf", "lags": 5,
                  "train_len": None, "test_len": 200, "calibration_fraction": 0.1, "seed": 0, "scale": True,
                  "delta": 0.1, "window": 100, "uncertainty_model": "rolling_abs_residual", "um_width": 20,
                  "options": {}, "out_dir": "out", "systems_file": None},
}


class UsageError(Exception):
    """Bad flags, config values or inputs; maps to exit code 2."""


def _csv_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def _int_list(text):
    try:
        return sorted({int(t) for t in _csv_list(text)})
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _option(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="symcast", description="Symbolic forecasting of chaotic and real-world series.")
    sub = parser.add_subparsers(dest="command", required=True)
    # defaults are None so we can tell explicit flags apart from unset ones
    common = argparse.ArgumentParser(add_help=False, argument_default=None)
    common.add_argument("--config", help="JSON config file (flags override it)")
    common.add_argument("--out-dir", dest="out_dir", help="output directory")
    common.add_argument("--seed", type=int, help="root random seed")

    def data_args(p):
        src = p.add_mutually_exclusive_group()
        src.add_argument("--system", help="built-in attractor name")
        src.add_argument("--csv", help="CSV file with a header row")
        p.add_argument("--column", help="CSV column holding the series")
        p.add_argument("--systems-file", dest="systems_file", help="JSON file of attractor overrides")
        p.add_argument("--n", type=int, help="points to simulate")
        p.add_argument("--model", choices=MODEL_NAMES)
        p.add_argument("--lags", type=int, help="number of lagged inputs p")
        p.add_argument("--train-len", dest="train_len", type=int)
        p.add_argument("--test-len", dest="test_len", type=int)
        p.add_argument("--set", dest="options", action="append", type=_option, metavar="KEY=VALUE",
                       help="model hyperparameter override (repeatable)")
        p.add_argument("--no-scale", dest="scale", action="store_false", default=None,
                       help="fit on raw values instead of z-scores")

    p = sub.add_parser("simulate", parents=[common], help="simulate an attractor to CSV")
    p.add_argument("--system")
    p.add_argument("--n", type=int)
    p.add_argument("--systems-file", dest="systems_file")
    p.add_argument("--no-lyapunov", dest="lyapunov", action="store_false", default=None)
    p.add_argument("--lyapunov-horizon", dest="lyapunov_horizon", type=int)

    p = sub.add_parser("fit-eval", parents=[common], help="fit a model and evaluate one-step forecasts")
    data_args(p)
    p.add_argument("--precision", type=int, help="decimals in the rendered equation")

    p = sub.add_parser("benchmark", parents=[common], help="systems x models x lags cross product")
    p.add_argument("--systems", type=_csv_list, help="comma-separated attractors (default: all bundled)")
    p.add_argument("--models", type=_csv_list)
    p.add_argument("--lags", type=_int_list, help="comma-separated lag counts, e.g. 5,10,25")
    p.add_argument("--n", type=int)
    p.add_argument("--train-len", dest="train_len", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--systems-file", dest="systems_file")
    p.add_argument("--set", dest="model_options", action="append", type=_option, metavar="MODEL.KEY=VALUE")
    p.add_argument("--no-scale", dest="scale", action="store_false", default=None)

    p = sub.add_parser("mcb", parents=[common], help="average-rank comparison from a scores CSV")
    p.add_argument("--scores", help="scores CSV written by the benchmark command")
    p.add_argument("--metric", choices=bm.METRICS)
    p.add_argument("--lags", type=int, help="restrict to one lag count")
    p.add_argument("--alpha", type=float)

    p = sub.add_parser("conformal", parents=[common], help="online conformal prediction intervals")
    data_args(p)
    p.add_argument("--delta", type=float, help="miscoverage level in (0, 1)")
    p.add_argument("--window", type=int, help="number of recent scores in the quantile")
    p.add_argument("--uncertainty-model", dest="uncertainty_model", choices=cf.UM_KINDS)
    p.add_argument("--um-width", dest="um_width", type=int)
    p.add_argument("--calibration-fraction", dest="calibration_fraction", type=float)
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge defaults, config file and explicit flags (in that order of precedence)."""
    cfg = json.loads(json.dumps(DEFAULTS[args.command]))
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as err:
            raise UsageError(f"config file {path} is not valid JSON: {err}")
        # allow either a flat mapping or one section per command
        section = loaded.get(args.command, loaded) if isinstance(loaded, dict) else None
        if not isinstance(section, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
        unknown = set(section) - set(cfg) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {', '.join(sorted(unknown))}")
        cfg.update({k: v for k, v in section.items() if k in cfg})
    for key, value in vars(args).items():
        if key in ("command", "config") or value is None:
            continue
        if key == "options":
            cfg["options"] = {**cfg["options"], **dict(value)}
        elif key == "model_options":
            merged = {m: dict(o) for m, o in cfg["model_options"].items()}
            for dotted, v in value:
                model, _, opt = dotted.partition(".")
                if not opt:
                    raise UsageError(f"benchmark overrides need MODEL.KEY=VALUE, got {dotted!r}")
                merged.setdefault(model, {})[opt] = v
            cfg["model_options"] = merged
        else:
            cfg[key] = value
    return cfg


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _echo_config(cfg: dict, command: str) -> None:
    _write(Path(cfg["out_dir"]) / "config.json", json.dumps({"command": command, **cfg}, indent=2, sort_keys=True) + "\n")


def _find_system(name: str, systems_file):
    if systems_file:
        if not Path(systems_file).is_file():
            raise UsageError(f"systems file not found: {systems_file}")
        for s in dynsys.load_system_file(systems_file):
            if dynsys.system_key(s.name) == dynsys.system_key(name):
                return s
    try:
        return dynsys.get_system(name)
    except dynsys.UnknownSystemError as err:
        raise UsageError(err.args[0])


def _load_series(cfg: dict):
    if (cfg["system"] is None) == (cfg["csv"] is None):
        raise UsageError("give exactly one data source: --system NAME or --csv PATH")
    if cfg["csv"] is not None:
        path = Path(cfg["csv"])
        if not path.is_file():
            raise UsageError(f"input file not found: {path}")
        try:
            return load_csv(path, cfg["column"], name=path.stem)
        except SeriesError as err:
            raise UsageError(str(err))
    system = _find_system(cfg["system"], cfg["systems_file"])
    return bm.simulate_series(system, bm.BenchSettings(seed=cfg["seed"]), n_points=cfg["n"])


def _split_for(cfg: dict, total: int, calibration_fraction: float = 0.0) -> SplitSpec:
    test = cfg["test_len"]
    if cfg["train_len"] is None:
        train = total - test
    else:
        train = cfg["train_len"]
    if test < 1 or train <= cfg["lags"] or train + test > total:
        raise UsageError(f"cannot split {total} points into train={train}, test={test} with {cfg['lags']} lags")
    spec = SplitSpec.with_calibration(train, test, calibration_fraction) if calibration_fraction else SplitSpec(train, 0, test)
    # points past train + test are dropped
    return spec


def _fit(cfg: dict, train_values, series_name: str):
    seed = bm.component_seed(cfg["seed"], "model", series_name, cfg["model"], cfg["lags"])
    try:
        return fit_forecaster(cfg["model"], train_values, cfg["lags"], seed=seed, scale=cfg["scale"], **cfg["options"])
    except ValueError as err:
        if str(err).startswith("unknown"):
            raise UsageError(str(err))
        raise


def cmd_simulate(cfg: dict, out=None) -> int:
    out = out or sys.stdout
    if cfg["n"] < 2:
        raise UsageError("--n must be at least 2")
    system = _find_system(cfg["system"], cfg["systems_file"])
    settings = bm.BenchSettings(seed=cfg["seed"])
    series = bm.simulate_series(system, settings, n_points=cfg["n"])
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{dynsys.system_key(system.name)}.csv"
    write_csv(path, series)
    _echo_config(cfg, "simulate")
    print(f"wrote {len(series)} points of {system.name} to {path}", file=out)
    if cfg["lyapunov"]:
        sim_cfg = dynsys.SimulationConfig(n_points=cfg["n"], seed=bm.component_seed(cfg["seed"], "simulate", dynsys.system_key(system.name)))
        est = dynsys.lyapunov_max(system, sim_cfg, horizon=cfg["lyapunov_horizon"])
        print(f"lambda_max = {est.lambda_max:.4f}", file=out)
    return 0


def cmd_fit_eval(cfg: dict, out=None) -> int:
    out = out or sys.stdout
    series = _load_series(cfg)
    split = _split_for(cfg, len(series))
    series = TimeSeries(series.values[: split.total], name=series.name)
    model = _fit(cfg, series.values[: split.train_len], series.name)
    report = rolling_one_step(model, series, split, cfg["lags"], precision=cfg["precision"])
    out_dir = Path(cfg["out_dir"])
    _write(out_dir / "report.json", report.to_json())
    _write(out_dir / "equation.txt", (report.equation or "") + "\n")
    if hasattr(model, "front_report"):
        _write(out_dir / "front.txt", model.front_report(cfg["precision"]))
    _echo_config(cfg, "fit-eval")
    m = report.metrics
    print(f"{cfg['model']} p={cfg['lags']} on {series.name}: SMAPE={m.smape:.4f} RMSE={m.rmse:.6g} "
          f"MAE={m.mae:.6g} MARRE={m.marre:.4f}", file=out)
    print(f"equation: {report.equation}", file=out)
    return 0


def cmd_benchmark(cfg: dict, out=None) -> int:
    out = out or sys.stdout
    systems = cfg["systems"] or [dynsys.system_key(s.name) for s in dynsys.catalog()]
    for s in systems:
        _find_system(s, None)
    bad = [m for m in cfg["models"] if m not in MODEL_NAMES]
    if bad:
        raise UsageError(f"unknown model(s) {', '.join(bad)}; choose from {', '.join(MODEL_NAMES)}")
    if not cfg["lags"] or min(cfg["lags"]) < 1:
        raise UsageError("--lags needs positive integers")
    if cfg["workers"] < 1:
        raise UsageError("--workers must be >= 1")
    if cfg["systems_file"]:
        raise UsageError("benchmark runs bundled attractors only; use fit-eval with --systems-file")
    options = tuple(sorted((m, tuple(sorted(o.items()))) for m, o in cfg["model_options"].items()))
    settings = bm.BenchSettings(cfg["n"], cfg["train_len"], cfg["seed"], cfg["scale"], options)
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, "benchmark")
    rows = bm.run_benchmark(systems, cfg["models"], cfg["lags"], out_dir / "scores.csv", settings,
                            workers=cfg["workers"], progress=lambda msg: print(msg, file=out, flush=True))
    failed = sorted({(r["system"], r["model"], r["lags"]) for r in rows if r["status"] != "ok"})
    print(f"{len(rows)} rows in {out_dir / 'scores.csv'}; {len(failed)} failed cells", file=out)
    return 0


def cmd_mcb(cfg: dict, out=None) -> int:
    out = out or sys.stdout
    if not cfg["scores"]:
        raise UsageError("--scores is required")
    path = Path(cfg["scores"])
    if not path.is_file():
        raise UsageError(f"scores file not found: {path}")
    try:
        rows = bm.read_scores(path)
        if rows and set(bm.FIELDS) - set(rows[0]):
            raise KeyError(", ".join(sorted(set(bm.FIELDS) - set(rows[0]))))
        datasets, models, mat = bm.score_matrix(rows, cfg["metric"], cfg["lags"])
        table = mcb.mcb_test(mat, cfg["alpha"], models)
    except (KeyError, ValueError) as err:
        raise UsageError(f"malformed scores file {path}: {err}")
    out_dir = Path(cfg["out_dir"])
    _write(out_dir / "ranks.csv", table.to_csv())
    _write(out_dir / "summary.txt", table.summary())
    _echo_config(cfg, "mcb")
    out.write(table.summary())
    return 0


def cmd_conformal(cfg: dict, out=None) -> int:
    out = out or sys.stdout
    try:
        conf = cf.ConformalConfig(cfg["delta"], cfg["window"], cfg["uncertainty_model"], cfg["um_width"])
    except cf.ConformalError as err:
        raise UsageError(str(err))
    series = _load_series(cfg)
    split = _split_for(cfg, len(series), cfg["calibration_fraction"])
    if split.calibration_len < 1:
        raise UsageError("calibration slice is empty; raise --calibration-fraction or --train-len")
    series = TimeSeries(series.values[: split.total], name=series.name)
    model = _fit(cfg, series.values[: split.train_len], series.name)
    run = cf.run_conformal(model, series, split, conf, cfg["lags"])
    out_dir = Path(cfg["out_dir"])
    _write(out_dir / "intervals.csv", run.to_csv())
    _echo_config(cfg, "conformal")
    print(f"target coverage {conf.coverage_target:.0%}; empirical coverage {run.coverage:.4f} "
          f"over {len(run.intervals)} test points ({run.n_calibration} calibration scores)", file=out)
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "fit-eval": cmd_fit_eval,
    "benchmark": cmd_benchmark,
    "mcb": cmd_mcb,
    "conformal": cmd_conformal,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except UsageError as err:
        print(f"symcast {args.command}: error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001
        print(f"symcast {args.command}: failed: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
