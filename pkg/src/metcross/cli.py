"""Command-line entry point: ``python -m metcross <subcommand>``.

Exit codes: 0 success, 2 argument or configuration error, 3 data error,
4 training divergence, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .baselines import FusionConfig
from .city import load_city
from .errors import DataError, DivergenceError, MetcrossError, ShapeError
from .evaluation import ExperimentResult, best_station_counts, dm_grid, mae_rmse
from .experiment import (ALL_MODELS, EXTRA_MODELS, Cell, RunConfig, best_frame, comparison_table,
                         dry_run, load_cities, output_root, prepare_source, prepare_task, run_experiment,
                         run_model, strip_covariates, write_cell)
from .matching import TRANSFORM_KINDS
from .pipeline import MetcrossConfig, PretrainedSource, pretrain
from .synth import SynthSpec, generate

EXIT_ARGS, EXIT_DATA, EXIT_DIVERGED = 2, 3, 4


class ArgumentError(Exception):
    pass


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _bases(text: str) -> list[str]:
    out = []
    for b in text.split(","):
        b = b.strip().upper()
        if b not in ("MLP", "LSTM"):
            raise argparse.ArgumentTypeError(f"unknown base kind {b!r}")
        out.append(b)
    return out


# (flag, MetcrossConfig field, argparse kwargs)
_MODEL_FLAGS = (
    ("--epochs", "epochs", dict(type=int)),
    ("--pretrain-epochs", "pretrain_epochs", dict(type=int)),
    ("--batch", "batch", dict(type=int, help="time periods per optimizer step")),
    ("--lr", "lr", dict(type=float)),
    ("--hidden", "hidden", dict(type=int)),
    ("--emb", "emb", dict(type=int)),
    ("--dropout", "dropout", dict(type=float)),
    ("--activation", "activation", dict(choices=("relu", "tanh"))),
    ("--dtype", "dtype", dict(choices=("float32", "float64"))),
    ("--w", "w", dict(type=float, help="balance coefficient of the embedding loss")),
    ("--n-e", "n_e", dict(type=int)),
    ("--n-d", "n_d", dict(type=int)),
    ("--h", "h", dict(type=int, help="flow lags per window")),
    ("--align", "align", dict(choices=("We", "AJ"))),
)


def _add_model_flags(p: argparse.ArgumentParser, seed: bool = True) -> None:
    g = p.add_argument_group("model hyperparameters (override the config file)")
    for flag, _, kw in _MODEL_FLAGS:
        g.add_argument(flag, default=None, **kw)
    g.add_argument("--no-residual", action="store_true", help="drop the residual connection")
    g.add_argument("--no-covariates", action="store_true", help="drop static and dynamic covariates")
    if seed:
        g.add_argument("--seed", type=int, default=None)


def _add_split_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--train-days", type=int, default=None)
    p.add_argument("--test-days", type=int, default=None)


def _overrides(args) -> dict:
    d = {}
    for flag, name, _ in _MODEL_FLAGS:
        v = getattr(args, flag[2:].replace("-", "_"), None)
        if v is not None:
            d[name] = v
    if getattr(args, "no_residual", False):
        d["with_residual"] = False
    if getattr(args, "no_covariates", False):
        d["with_covariates"] = False
    return d


def _run_config(args, single: bool = False) -> RunConfig:
    """Config file values (or defaults), then command-line overrides.

    ``single`` commands default to the MLP base and 25 training days.
    """
    d = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ArgumentError(f"config file {path} does not exist")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ArgumentError(f"{path}: not valid JSON ({e})") from None
        if not isinstance(d, dict):
            raise ArgumentError(f"{path}: expected a JSON object")
    model = {k: d.pop(k) for k in list(d) if k in {f.name for f in fields(MetcrossConfig)}}
    model.update(d.pop("model", {}) or {})
    model.update(_overrides(args))
    for name in ("source", "target", "missing"):
        if getattr(args, name, None) is not None:
            d[name] = getattr(args, name)
    if getattr(args, "seed", None) is not None:
        d["seeds"] = [args.seed]
        model.pop("seed", None)
    if getattr(args, "seeds", None) is not None:
        d["seeds"] = args.seeds
        model.pop("seed", None)
    if getattr(args, "train_days", None) is not None:
        td = args.train_days
        d["train_days"] = td if isinstance(td, list) else [td]
    if getattr(args, "test_days", None) is not None:
        d["test_days"] = args.test_days
    if getattr(args, "models", None) is not None:
        d["models"] = args.models
    if getattr(args, "base", None) is not None:
        d["bases"] = args.base
        model.pop("base_kind", None)
    if single:
        if "bases" not in d and "base_kind" not in model:
            d["bases"] = ["MLP"]
        d.setdefault("train_days", [25])
    try:
        return RunConfig.from_dict({**d, "model": model})
    except (TypeError, ValueError) as e:
        raise ArgumentError(str(e)) from None


def _single(run: RunConfig, what: str) -> tuple[int, int, str]:
    if len(run.train_days) != 1 or len(run.seeds) != 1 or len(run.bases) != 1:
        raise ArgumentError(f"{what} takes a single training length, seed and base kind")
    return run.train_days[0], run.seeds[0], run.bases[0]


def _out(args, default: str) -> Path:
    return Path(args.out) if args.out else output_root() / default


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------- subcommands

def cmd_generate(args) -> int:
    spec = SynthSpec(S=args.S, G=args.G, days=args.days, granularity_minutes=args.granularity,
                     n_profiles=args.profiles, coupling=args.coupling, noise=args.noise,
                     weather_noise=args.weather_noise, seed=args.seed,
                     start=args.start, weather=not args.no_weather,
                     informative_statics=not args.plain_statics)
    out = _out(args, f"synth-seed{args.seed}")
    generate(spec).save(out)
    _emit({"out": str(out), "source": str(out / "source"), "target": str(out / "target")})
    return 0


def cmd_match(args) -> int:
    source = load_city(args.source, args.missing)
    target = load_city(args.target, args.missing)
    task = prepare_task(source, target, args.train_days, args.test_days)
    out = _out(args, "match")
    task.match.to_csv(out)
    _emit({"out": str(out), "target_stations": task.match.G, "source_stations": task.match.S,
           "mean_pair_similarity": float(task.match.pair_similarity.mean())})
    return 0


def cmd_pretrain(args) -> int:
    run = _run_config(args, single=True)
    days, seed, base = _single(run, "pretrain")
    if not run.source:
        raise ArgumentError("--source is required")
    cfg = replace(run.model, seed=seed, base_kind=base)
    windows = prepare_source(load_city(run.source, run.missing), days, run.test_days, cfg.h)
    if not cfg.with_covariates:
        windows = strip_covariates(windows)
    pre = pretrain(windows, cfg)
    out = Path(args.out) if args.out else output_root() / f"pretrain-{cfg.config_hash()}" / "checkpoint.npz"
    pre.save(out)
    _emit({"checkpoint": str(out), "config_hash": pre.config_hash, "seed": seed,
           "final_loss": float(pre.history[-1]) if pre.history else None})
    return 0


def _write_single(run: RunConfig, model_key: str, days: int, seed: int, base: str, mr, task,
                  out: Path, cfg: MetcrossConfig | None = None) -> dict:
    cell_run = replace(run, models=(model_key,), bases=(base,), seeds=(seed,), train_days=(days,),
                       model=cfg if cfg is not None else run.model)
    cell = Cell(cell_run, model_key, base, days, seed)
    station_ids = task.match.target_ids
    res = ExperimentResult(mr.label, model_key, base, days, seed, cell.config_hash(), station_ids,
                           mae_rmse(mr.pred.T, mr.actual.T), task.test_range)
    _, t_te, _ = task.test.open("evaluate")
    write_cell(cell, mr, res, task, t_te.timestamps, out)
    return {"dir": str(out / cell.name), "label": res.label, "mae": res.metrics.mae,
            "rmse": res.metrics.rmse, "config_hash": res.config_hash, "seed": seed}


def cmd_finetune(args) -> int:
    run = _run_config(args, single=True)
    source, target = load_cities(run)
    pre = PretrainedSource.load(args.pretrained)
    over = _overrides(args)
    cfg = replace(pre.config, **{k: v for k, v in over.items() if k != "with_covariates"})
    days = run.train_days[0] if len(run.train_days) == 1 else None
    if days is None:
        raise ArgumentError("finetune takes a single --train-days")
    task = prepare_task(source, target, days, run.test_days, cfg.h)
    key = "metcross" if cfg.with_covariates else "metcross_wo_ex"
    mr = run_model(task, key, cfg, pretrained=pre)
    out = _out(args, "finetune")
    _emit(_write_single(run, key, days, cfg.seed, cfg.base_kind, mr, task, out, cfg))
    return 0


def cmd_baseline(args) -> int:
    run = _run_config(args, single=True)
    days, seed, base = _single(run, "baseline")
    regime = args.regime.upper()
    if regime == "LASTVALUE":
        key = "last_value"
    else:
        transform = args.transform
        if transform is not None:
            transform = {t.lower(): t for t in TRANSFORM_KINDS}.get(transform.lower(), transform)
        try:
            key = FusionConfig(regime, transform, base).key
        except ValueError as e:
            raise ArgumentError(str(e)) from None
    source, target = load_cities(run)
    task = prepare_task(source, target, days, run.test_days, run.model.h)
    cfg = replace(run.model, seed=seed, base_kind=base)
    mr = run_model(task, key, cfg, {})
    out = _out(args, "baseline")
    _emit(_write_single(run, key, days, seed, base, mr, task, out, run.model))
    return 0


def _read_run_dir(path: Path) -> tuple[dict, pd.DataFrame]:
    pred_file = path / "predictions.csv"
    if not pred_file.exists():
        raise DataError(f"{path}: no predictions.csv")
    df = pd.read_csv(pred_file, dtype={"station_id": str})
    missing = {"station_id", "timestamp", "predicted", "actual"} - set(df.columns)
    if missing:
        raise DataError(f"{pred_file}: missing columns {sorted(missing)}")
    meta = json.loads((path / "metrics.json").read_text()) if (path / "metrics.json").exists() else {}
    return meta, df


def _matrix(df: pd.DataFrame, column: str) -> tuple[list[str], np.ndarray]:
    wide = df.pivot(index="station_id", columns="timestamp", values=column)
    return list(wide.index), wide.to_numpy(np.float64)


def _result_from_dir(path: Path) -> tuple[ExperimentResult, np.ndarray]:
    meta, df = _read_run_dir(path)
    ids, pred = _matrix(df, "predicted")
    _, actual = _matrix(df, "actual")
    metrics = mae_rmse(pred, actual)
    res = ExperimentResult(meta.get("label", path.name), meta.get("model", path.name),
                           meta.get("base_kind", ""), int(meta.get("train_days", 0)),
                           int(meta.get("seed", 0)), meta.get("config_hash", ""), ids, metrics,
                           tuple(meta.get("test_range", ("", ""))))
    return res, pred - actual


def cmd_evaluate(args) -> int:
    results = [_result_from_dir(Path(p))[0] for p in args.runs]
    ids = [tuple(r.station_ids) for r in results]
    if len(set(ids)) > 1:
        raise DataError("runs cover different station sets")
    out = _out(args, "evaluate")
    out.mkdir(parents=True, exist_ok=True)
    payload = [r.to_dict() for r in results]
    (out / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    csv = dict(index=False, lineterminator="\n")
    comparison_table(results).to_csv(out / "table.csv", **csv)
    best_frame(results).to_csv(out / "best_stations.csv", **csv)
    _emit({"out": str(out), "runs": [{"label": r.label, "mae": r.metrics.mae, "rmse": r.metrics.rmse,
                                      "config_hash": r.config_hash, "seed": r.seed} for r in results],
           "best_stations_mae": best_station_counts({r.label: r.metrics.mae_per_station for r in results})})
    return 0


def cmd_dmtest(args) -> int:
    m_res, m_err = _result_from_dir(Path(args.metcross))
    base_errs = {}
    for p in args.baseline:
        r, e = _result_from_dir(Path(p))
        if list(r.station_ids) != list(m_res.station_ids) or e.shape != m_err.shape:
            raise DataError(f"{p}: stations or test range differ from {args.metcross}")
        base_errs[r.label] = e
    labels, stats, pvals = dm_grid(m_err, base_errs, args.loss, args.horizon, args.alpha)
    rows = [{"station_id": sid, "baseline": name, "statistic": stats[g, j], "p_value": pvals[g, j],
             "result": labels[g, j], "config_hash": m_res.config_hash, "seed": m_res.seed}
            for j, name in enumerate(base_errs) for g, sid in enumerate(m_res.station_ids)]
    out = _out(args, "dmtest")
    out.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows).to_csv(out / "dm_grid.csv", index=False, lineterminator="\n")
    tally = {name: {k: int(np.sum(labels[:, j] == k))
                    for k in ("metcross-better", "baseline-better", "inconclusive")}
             for j, name in enumerate(base_errs)}
    _emit({"out": str(out / "dm_grid.csv"), "counts": tally})
    return 0


def cmd_experiment(args) -> int:
    run = _run_config(args)
    if args.dry_run:
        print(f"# config {run.config_hash()}: {len(run.cells())} cells")
        print("\n".join(dry_run(run)))
        return 0
    out = _out(args, f"experiment-{run.config_hash()}")
    bundle = run_experiment(run, out)
    print(bundle.summary().to_string(index=False))
    print(f"results in {out}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metcross", description="Cross-city metro passenger-flow transfer forecasting.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    g = sub.add_parser("generate", help="write a synthetic source/target city pair")
    g.add_argument("--out")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--S", type=int, default=115, help="source stations")
    g.add_argument("--G", type=int, default=44, help="target stations")
    g.add_argument("--days", type=int, default=30)
    g.add_argument("--granularity", type=int, default=10, help="minutes per period")
    g.add_argument("--profiles", type=int, default=SynthSpec.n_profiles)
    g.add_argument("--coupling", type=float, default=0.8)
    g.add_argument("--noise", type=float, default=SynthSpec.noise)
    g.add_argument("--weather-noise", type=float, default=SynthSpec.weather_noise,
                   help="scale of the random part of the synthetic weather")
    g.add_argument("--start", default="2017-03-01")
    g.add_argument("--no-weather", action="store_true")
    g.add_argument("--plain-statics", action="store_true", help="statics unrelated to the flow profiles")
    g.set_defaults(func=cmd_generate)

    m = sub.add_parser("match", help="write Si/AJ/We matrices for a city pair")
    m.add_argument("--source", required=True)
    m.add_argument("--target", required=True)
    m.add_argument("--train-days", type=int, default=25)
    m.add_argument("--test-days", type=int, default=5)
    m.add_argument("--missing", choices=("reject", "zero"), default="reject")
    m.add_argument("--out")
    m.set_defaults(func=cmd_match)

    pt = sub.add_parser("pretrain", help="pre-train the source-city networks")
    pt.add_argument("--config")
    pt.add_argument("--source")
    pt.add_argument("--base", type=_bases)
    pt.add_argument("--missing", choices=("reject", "zero"))
    _add_split_flags(pt)
    _add_model_flags(pt)
    pt.add_argument("--out", help="checkpoint path")
    pt.set_defaults(func=cmd_pretrain)

    ft = sub.add_parser("finetune", help="fine-tune on the target city from a source checkpoint")
    ft.add_argument("--config")
    ft.add_argument("--source")
    ft.add_argument("--target")
    ft.add_argument("--pretrained", required=True, help="checkpoint written by pretrain")
    ft.add_argument("--missing", choices=("reject", "zero"))
    _add_split_flags(ft)
    _add_model_flags(ft, seed=False)
    ft.add_argument("--out")
    ft.set_defaults(func=cmd_finetune)

    b = sub.add_parser("baseline", help="train and evaluate one reference model")
    b.add_argument("--config")
    b.add_argument("--source")
    b.add_argument("--target")
    b.add_argument("--regime", required=True, help="NF, DF, FF, PF, FT-P, FT-F or LastValue")
    b.add_argument("--transform", help=f"one of {', '.join(TRANSFORM_KINDS)} (DF/FF/PF only)")
    b.add_argument("--base", type=_bases)
    b.add_argument("--missing", choices=("reject", "zero"))
    _add_split_flags(b)
    _add_model_flags(b)
    b.add_argument("--out")
    b.set_defaults(func=cmd_baseline)

    e = sub.add_parser("evaluate", help="metrics, comparison table and best-station counts of run directories")
    e.add_argument("runs", nargs="+", help="directories holding predictions.csv")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    d = sub.add_parser("dmtest", help="per-station Diebold-Mariano grid of METcross against baselines")
    d.add_argument("--metcross", required=True, help="METcross run directory")
    d.add_argument("--baseline", required=True, nargs="+", help="baseline run directories")
    d.add_argument("--loss", choices=("absolute", "squared"), default="absolute")
    d.add_argument("--horizon", type=int, default=1)
    d.add_argument("--alpha", type=float, default=0.05)
    d.add_argument("--out")
    d.set_defaults(func=cmd_dmtest)

    x = sub.add_parser("experiment", help="run the model x base x training-length grid")
    x.add_argument("--config", help="JSON run configuration")
    x.add_argument("--source")
    x.add_argument("--target")
    x.add_argument("--models", help=f"comma list from {', '.join(ALL_MODELS + EXTRA_MODELS)}")
    x.add_argument("--base", type=_bases, help="comma list of MLP, LSTM")
    x.add_argument("--train-days", type=_ints)
    x.add_argument("--test-days", type=int)
    x.add_argument("--seeds", type=_ints)
    x.add_argument("--missing", choices=("reject", "zero"))
    x.add_argument("--dry-run", action="store_true", help="print the resolved grid without training")
    _add_model_flags(x, seed=False)
    x.add_argument("--out")
    x.set_defaults(func=cmd_experiment)
    return p


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ArgumentError as e:
        parser.print_usage(sys.stderr)
        return _fail(EXIT_ARGS, "argument", str(e))
    except DivergenceError as e:
        return _fail(EXIT_DIVERGED, "divergence", str(e))
    except (DataError, ShapeError, FileNotFoundError) as e:
        return _fail(EXIT_DATA, "data", str(e))
    except MetcrossError as e:
        return _fail(1, "error", str(e))


if __name__ == "__main__":
    sys.exit(main())
