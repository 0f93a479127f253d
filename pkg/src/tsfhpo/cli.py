"""Command-line entry point: tune, resume, analyze, report, gen-data, bench.

Machine-readable results go to stdout as JSON; everything meant for humans
goes to stderr. Exit codes: 0 success, 1 finished with failures, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .analysis import write_report, write_summary
from .forecast.data import IngestionError, SplitError, gen_synthetic
from .forecast.models import VARIANTS, ModelError
from .hyperspace import DomainError, InvalidConfig, SearchSpace
from .scheduler import (
    ExperimentPlan,
    ExperimentResult,
    ResumeError,
    continue_experiment,
    resume,
    run_experiment,
)
from .searchers import SEARCHER_KINDS
from .store import LoadError, StoreError

log = logging.getLogger("tsfhpo")

EXIT_OK, EXIT_FAILURES, EXIT_USAGE = 0, 1, 2

# Defaults shared with the reference forecasting library's parameter table.
LIBRARY_DEFAULTS = {
    "seq_len": 96,
    "label_len": 48,
    "pred_len": 96,
    "features": "M",
    "target": "OT",
    "root_path": "./data/ETT/",
    "data_path": "ETTh1.csv",
    "patience": 3,
    "lradj": "type1",
}

# Desk-scale bench settings: short windows, small series, a few-MB memory
# budget so that wide configurations fail the gate, and the work-based clock
# so reports are byte-stable.
DESK_PRESET = {
    "seq_len": 24,
    "label_len": 12,
    "pred_len": 12,
    "timesteps": 480,
    "mem_budget": 8_000_000,
    "clock": "simulated",
}
SYNTHETIC_CHANNELS = {"syn_etth1": 7, "syn_weather": 21, "syn_ecl": 321}

_CONFIG_ERRORS = (
    ValueError,
    OSError,
    IngestionError,
    SplitError,
    DomainError,
    InvalidConfig,
    ModelError,
    ResumeError,
    LoadError,
)


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _non_negative_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {v}")
    return v


def _fraction(text: str) -> float:
    v = _positive_float(text)
    if v >= 1:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {v}")
    return v


def _add_data_flags(p: argparse.ArgumentParser, defaults: bool = True) -> None:
    d = LIBRARY_DEFAULTS if defaults else {k: None for k in LIBRARY_DEFAULTS}
    g = p.add_argument_group("data")
    g.add_argument("--root_path", default=d["root_path"], help="root path of the data file")
    g.add_argument("--seq_len", type=_positive_int, default=d["seq_len"], help="input sequence length")
    g.add_argument("--label_len", type=_non_negative_int, default=d["label_len"], help="start token length")
    g.add_argument("--pred_len", type=_positive_int, default=d["pred_len"], help="prediction sequence length")
    g.add_argument("--features", choices=("M", "S", "MS"), default=d["features"], help="forecasting task")
    g.add_argument("--target", default=d["target"], help="target feature in S or MS task")


def _add_hpo_flags(p: argparse.ArgumentParser, bench: bool = False) -> None:
    g = p.add_argument_group("search")
    g.add_argument("--searcher", choices=SEARCHER_KINDS, default="tpe")
    g.add_argument("--tpe-gamma", type=_fraction, default=None, help="good-split fraction")
    g.add_argument("--tpe-startup", type=_non_negative_int, default=None, help="random trials before TPE")
    g.add_argument("--tpe-candidates", type=_positive_int, default=None, help="candidates scored per suggestion")
    g.add_argument("--trials", type=_positive_int, default=20)
    g.add_argument("--seed", type=_non_negative_int, default=0)
    g.add_argument("--max-concurrent", type=_positive_int, default=1)
    g.add_argument("--mem-budget", type=_positive_int, default=None if bench else 1 << 30, help="bytes")
    g.add_argument("--clock", choices=("wall", "simulated"), default=None if bench else "wall")
    g.add_argument("--space", help="search-space file (defaults to the builtin nine-parameter space)")
    o = p.add_argument_group("optimization")
    o.add_argument("--batch_size", type=_positive_int, help="fix batch size instead of tuning it")
    o.add_argument("--learning_rate", type=_positive_float, help="fix learning rate instead of tuning it")
    o.add_argument("--train_epochs", type=_positive_int, help="fix train epochs instead of tuning them")
    o.add_argument("--patience", type=_positive_int, default=LIBRARY_DEFAULTS["patience"], help="early stopping patience")
    o.add_argument("--lradj", choices=("type1",), default=LIBRARY_DEFAULTS["lradj"], help="adjust learning rate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsfhpo", description="Hyperparameter search for desk-scale forecasting models.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every trial")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tune", help="run one search experiment")
    p.add_argument("--model", choices=VARIANTS, required=True)
    p.add_argument("--data_path", default=LIBRARY_DEFAULTS["data_path"], help="data file")
    p.add_argument("--out", required=True, help="experiment directory")
    _add_data_flags(p)
    _add_hpo_flags(p)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("resume", help="continue an interrupted experiment")
    p.add_argument("dir")
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("analyze", help="write plots and tables for one experiment")
    p.add_argument("dir")
    p.add_argument("--out", help="report directory (default DIR/report)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("report", help="cross-experiment best-results table")
    p.add_argument("--experiments", nargs="+", required=True)
    p.add_argument("--out", default=".", help="directory for best_results.md and oom.md")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gen-data", help="write a synthetic multivariate CSV")
    p.add_argument("--channels", type=int, default=7)
    p.add_argument("--timesteps", type=int, default=2000)
    p.add_argument("--period", type=_positive_int, default=24)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=_non_negative_int, default=0)
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("bench", help="run every model on every dataset, then report")
    p.add_argument("--models", nargs="+", choices=VARIANTS, default=list(VARIANTS))
    p.add_argument("--datasets", nargs="+", default=[], help="CSV files")
    p.add_argument("--synthetic", action="store_true", help="generate three synthetic datasets (7, 21, 321 channels)")
    p.add_argument("--timesteps", type=_positive_int, help="length of generated datasets")
    p.add_argument("--desk", action="store_true", help="desk-scale preset for unset window/budget/clock flags")
    p.add_argument("--out", required=True)
    _add_data_flags(p, defaults=False)
    _add_hpo_flags(p, bench=True)
    p.set_defaults(func=cmd_bench)
    return parser


def _resolve_data_path(root_path: str, data_path: str) -> Path:
    p = Path(data_path)
    if p.is_absolute() or p.exists():
        return p
    return Path(root_path) / p


def _load_space(path: str | None) -> SearchSpace:
    if path is None:
        return SearchSpace.builtin()
    return SearchSpace.from_text(Path(path).read_text())


def _plan_from_args(args, variant: str, data_path, seed: int | None = None) -> ExperimentPlan:
    space = _load_space(args.space)
    fixed: dict[str, Any] = {}
    for name in ("batch_size", "learning_rate", "train_epochs"):
        v = getattr(args, name)
        if v is not None:
            fixed[name] = v
    if fixed:
        space = space.subset([n for n in space if n not in fixed])
    knobs = {}
    if args.searcher == "tpe":
        for flag, knob in (("tpe_gamma", "gamma_fraction"), ("tpe_startup", "n_startup"), ("tpe_candidates", "n_candidates")):
            v = getattr(args, flag)
            if v is not None:
                knobs[knob] = v
    return ExperimentPlan(
        variant=variant,
        data_path=str(data_path),
        space=space,
        searcher=args.searcher,
        searcher_knobs=knobs,
        n_trials=args.trials,
        max_concurrent=args.max_concurrent,
        mem_budget=args.mem_budget,
        seed=args.seed if seed is None else seed,
        seq_len=args.seq_len,
        label_len=args.label_len,
        pred_len=args.pred_len,
        features=args.features,
        target=args.target,
        patience=args.patience,
        fixed_params=fixed,
        clock=args.clock,
    )


def _summary(result: ExperimentResult, exp_dir) -> dict[str, Any]:
    out: dict[str, Any] = {
        "experiment": str(exp_dir),
        "model": result.variant,
        "dataset": result.dataset,
        "trials": len(result.records),
        "status_counts": result.totals,
    }
    best = result.best
    if best is not None:
        out["best"] = {
            "trial_id": best.trial_id,
            "params": best.params,
            "val_mse": best.val_mse,
            "val_mae": best.val_mae,
            "test_mse": best.test_mse,
            "test_mae": best.test_mae,
        }
    return out


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=2)
    sys.stdout.write("\n")
    sys.stdout.flush()


def _finish(result: ExperimentResult, exp_dir) -> int:
    _emit(_summary(result, exp_dir))
    t = result.totals
    print(
        f"{result.variant} on {result.dataset}: {len(result.records)} trials, "
        + ", ".join(f"{k}={v}" for k, v in t.items()),
        file=sys.stderr,
    )
    return EXIT_OK if result.best is not None else EXIT_FAILURES


def cmd_tune(args) -> int:
    path = _resolve_data_path(args.root_path, args.data_path)
    plan = _plan_from_args(args, args.model, path)
    result = run_experiment(plan, args.out)
    return _finish(result, args.out)


def cmd_resume(args) -> int:
    state = resume(args.dir)
    print(f"resuming {args.dir}: {len(state.done)} stored, {state.remaining} to run", file=sys.stderr)
    return _finish(continue_experiment(state), args.dir)


def cmd_analyze(args) -> int:
    out = write_report(args.dir, args.out)
    print(f"report written to {out}", file=sys.stderr)
    _emit({"report": str(out), "files": sorted(p.name for p in out.iterdir())})
    return EXIT_OK


def cmd_report(args) -> int:
    paths = write_summary(args.experiments, args.out)
    print(f"wrote {', '.join(str(p) for p in paths)}", file=sys.stderr)
    _emit({"files": [str(p) for p in paths]})
    return EXIT_OK


def cmd_gen_data(args) -> int:
    if args.channels < 1 or args.timesteps < 1:
        raise UsageError("channels and timesteps must be >= 1")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds = gen_synthetic(args.channels, args.timesteps, args.period, args.noise, args.seed, path=out)
    _emit({"path": str(out), "channels": ds.n_channels, "timesteps": ds.n_timesteps})
    return EXIT_OK


def _bench_settings(args) -> None:
    """Fill unset flags from the desk preset or the library defaults, in place."""
    base = dict(LIBRARY_DEFAULTS, timesteps=2000, mem_budget=1 << 30, clock="wall")
    if args.desk:
        base.update(DESK_PRESET)
    for name in ("seq_len", "label_len", "pred_len", "features", "target", "root_path", "timesteps", "mem_budget", "clock"):
        if getattr(args, name) is None:
            setattr(args, name, base[name])


def cmd_bench(args) -> int:
    _bench_settings(args)
    out = Path(args.out)
    datasets: list[Path] = [_resolve_data_path(args.root_path, d) for d in args.datasets]
    if args.synthetic:
        data_dir = out / "data"
        data_dir.mkdir(parents=True, exist_ok=True)
        for i, (name, channels) in enumerate(SYNTHETIC_CHANNELS.items()):
            path = data_dir / f"{name}.csv"
            gen_synthetic(channels, args.timesteps, seed=args.seed + i, path=path, name=name)
            datasets.append(path)
    if not datasets:
        raise UsageError("bench needs --datasets and/or --synthetic")

    exp_dirs: list[Path] = []
    aborted = 0
    total = 0
    for data_path in datasets:
        for variant in args.models:
            exp_dir = out / f"{variant}__{Path(data_path).stem}"
            try:
                plan = _plan_from_args(args, variant, data_path)
                result = run_experiment(plan, exp_dir)
                write_report(exp_dir)
            except _CONFIG_ERRORS + (StoreError,) as exc:
                aborted += 1
                print(f"error: {variant} on {data_path}: {exc}", file=sys.stderr)
                continue
            total += len(result.records)
            exp_dirs.append(exp_dir)
            print(f"{variant} on {result.dataset}: {len(result.records)} trials, {result.totals}", file=sys.stderr)
    files = [str(p) for p in write_summary(exp_dirs, out)] if exp_dirs else []
    print(f"{total} trials across {len(exp_dirs)} experiments", file=sys.stderr)
    _emit({"total_trials": total, "experiments": [str(d) for d in exp_dirs], "aborted": aborted, "files": files})
    return EXIT_FAILURES if aborted else EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StoreError as exc:
        print(f"error: {exc} (last durable trial: {exc.last_durable_trial})", file=sys.stderr)
        return EXIT_FAILURES
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
