"""Train/test preparation, the model registry and the experiment grid runner."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .baselines import LastValueModel, make_baseline, table3_grid
from .city import City, load_city
from .data import (CityScalers, FeatureWindows, WindowSpec, build_feature_bundles, fit_normalizers,
                   split_positions)
from .errors import DataError, MetcrossError, with_context
from .evaluation import (ExperimentResult, best_station_counts, boost, dm_grid, mae_rmse)
from .matching import StationMatch, build_match
from .pipeline import MetcrossConfig, PretrainedSource, finetune, pretrain
from .training import HyperParams, config_hash

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "METCROSS_OUTPUT_ROOT"
BASELINE_KEYS = tuple(c.key for c in table3_grid("MLP"))
ALL_MODELS = ("last_value", *BASELINE_KEYS, "metcross")
EXTRA_MODELS = ("metcross_wo_res", "metcross_wo_ex")


class SealedTest:
    """Test-range windows that stay unreadable until the evaluation stage."""

    def __init__(self, source: FeatureWindows, target: FeatureWindows, actual: np.ndarray):
        self._payload = (source, target, actual)
        self.opened = False

    def open(self, stage: str):
        if stage != "evaluate":
            raise DataError(f"test-range data requested during stage {stage!r}")
        self.opened = True
        return self._payload


@dataclass(eq=False)
class TransferTask:
    source_train: FeatureWindows
    target_train: FeatureWindows
    match: StationMatch
    source_scalers: CityScalers
    target_scalers: CityScalers
    test: SealedTest
    train_days: int
    test_days: int
    test_range: tuple[str, str]


def _windows(city: City, spec: WindowSpec, start: int, stop: int, with_statics: bool = True):
    return build_feature_bundles(city.panel, spec, city.statics if with_statics else None,
                                 city.dynamics, start, stop)


def prepare_task(source: City, target: City, train_days: int, test_days: int = 5, h: int = 5) -> TransferTask:
    """Split both cities, match stations and fit scalers on the training range only."""
    ps, pt = source.panel, target.panel
    if ps.granularity_minutes != pt.granularity_minutes or ps.n_periods != pt.n_periods \
            or np.any(ps.timestamps != pt.timestamps):
        raise DataError("source and target flows must share timestamps and granularity")
    train, test = split_positions(pt.n_periods, pt.periods_per_day, train_days, test_days)
    spec = WindowSpec(h)
    first = max(train.start, h)
    src_tr = _windows(source, spec, first, train.stop)
    tgt_tr = _windows(target, spec, first, train.stop)
    s_scale, t_scale = fit_normalizers(src_tr), fit_normalizers(tgt_tr)
    match = build_match(ps, pt, train)
    src_te = _windows(source, spec, test.start, test.stop)
    tgt_te = _windows(target, spec, test.start, test.stop)
    sealed = SealedTest(s_scale.apply(src_te), t_scale.apply(tgt_te), tgt_te.target.copy())
    ts = pt.timestamps
    return TransferTask(s_scale.apply(src_tr), t_scale.apply(tgt_tr), match, s_scale, t_scale, sealed,
                        train_days, test_days, (str(ts[test.start]), str(ts[test.stop - 1])))


def strip_covariates(w: FeatureWindows) -> FeatureWindows:
    return replace(w, A=w.A[:, :0], D=w.D[:, :0])


def metcross_variant(cfg: MetcrossConfig, key: str) -> MetcrossConfig:
    if key == "metcross":
        return cfg
    if key == "metcross_wo_res":
        return replace(cfg, with_residual=False)
    if key == "metcross_wo_ex":
        return replace(cfg, with_covariates=False)
    raise ValueError(f"unknown METcross variant {key!r}")


@dataclass(eq=False)
class ModelRun:
    key: str
    label: str
    pred: np.ndarray          # [T', G] on the original flow scale
    actual: np.ndarray
    model: object
    history: list


def _label(key: str, base_kind: str) -> str:
    p = "ML" if base_kind == "MLP" else "LS"
    if key == "last_value":
        return "LastValue"
    if key.startswith("metcross"):
        return f"{p}_Cross" + {"metcross": "", "metcross_wo_res": "_woRes", "metcross_wo_ex": "_woEx"}[key]
    return next(c.label for c in table3_grid(base_kind) if c.key == key)


def prepare_source(city: City, train_days: int, test_days: int = 5, h: int = 5) -> FeatureWindows:
    """Normalized training windows of a single city, split as in :func:`prepare_task`."""
    p = city.panel
    train, _ = split_positions(p.n_periods, p.periods_per_day, train_days, test_days)
    w = _windows(city, WindowSpec(h), max(train.start, h), train.stop)
    return fit_normalizers(w).apply(w)


def run_model(task: TransferTask, key: str, cfg: MetcrossConfig, cache: dict | None = None,
              pretrained: PretrainedSource | None = None) -> ModelRun:
    """Train one model on the task's training range and predict its test range.

    METcross variants reuse ``pretrained`` when given instead of pre-training.
    """
    cache = {} if cache is None else cache
    src, tgt = task.source_train, task.target_train
    base = cfg.base_kind
    if key.startswith("metcross"):
        mc = metcross_variant(cfg, key)
        if not mc.with_covariates:
            src, tgt = strip_covariates(src), strip_covariates(tgt)
        pk_base = ("metcross_pretrain", mc.with_covariates,
                   replace(mc, with_residual=True, w=0.5).config_hash())
        pre = pretrained if pretrained is not None else cache.get(pk_base)
        if pre is None:
            pre = pretrain(src, mc)
            cache[pk_base] = pre
        model = finetune(tgt, src, pre, task.match, mc)
        history = model.history
        s_te, t_te, actual = task.test.open("evaluate")
        if not mc.with_covariates:
            s_te, t_te = strip_covariates(s_te), strip_covariates(t_te)
        pred = model.predict(t_te, s_te)
    else:
        if key == "last_value":
            model = LastValueModel()
        else:
            fc = next((c for c in table3_grid(base) if c.key == key), None)
            if fc is None:
                raise ValueError(f"unknown model {key!r}")
            model = make_baseline(fc, cfg.h, hyperparams(cfg), cache=cache)
        history = model.fit(tgt, src, task.match)
        s_te, t_te, actual = task.test.open("evaluate")
        pred = model.predict(t_te, s_te)
    return ModelRun(key, _label(key, base), task.target_scalers.invert_flow(pred), actual, model, history)




def hyperparams(cfg: MetcrossConfig) -> HyperParams:
    """The plain training hyperparameters of a METcross config."""
    names = {f.name for f in fields(HyperParams)}
    return HyperParams(**{k: v for k, v in asdict(cfg).items() if k in names})


BASE_KINDS = ("MLP", "LSTM")
DEFAULT_OUTPUT = "metcross-runs"

# Smaller networks and fewer epochs than the library defaults so that a
# 10-seed synthetic sweep finishes on one laptop core.
DESK_PROFILE = MetcrossConfig(epochs=40, pretrain_epochs=40, batch=64, hidden=64, emb=64, dtype="float32")


def output_root(explicit: str | None = None) -> Path:
    """Explicit path, else ``$METCROSS_OUTPUT_ROOT``, else ``./metcross-runs``."""
    return Path(explicit or os.environ.get(OUTPUT_ROOT_ENV) or DEFAULT_OUTPUT)


@dataclass(frozen=True)
class RunConfig:
    """Everything an experiment grid needs; serialized into every result file.

    The file form is a flat JSON object: the fields below plus any
    :class:`MetcrossConfig` field. ``seed`` and ``base_kind`` given there act
    as one-element ``seeds`` and ``bases``.
    """

    source: str | None = None
    target: str | None = None
    train_days: tuple[int, ...] = (25, 7, 3)
    test_days: int = 5
    models: tuple[str, ...] = ALL_MODELS
    bases: tuple[str, ...] = BASE_KINDS
    seeds: tuple[int, ...] = (0,)
    missing: str = "reject"
    dm_loss: str = "absolute"
    dm_horizon: int = 1
    model: MetcrossConfig = field(default_factory=MetcrossConfig)

    def __post_init__(self):
        for name in ("train_days", "models", "bases", "seeds"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.train_days or min(self.train_days) < 1 or self.test_days < 1:
            raise ValueError("train and test lengths must be positive day counts")
        unknown = [m for m in self.models if m not in ALL_MODELS + EXTRA_MODELS]
        if unknown or not self.models:
            raise ValueError(f"unknown models {unknown}; choose from {', '.join(ALL_MODELS + EXTRA_MODELS)}")
        bad = [b for b in self.bases if b not in BASE_KINDS]
        if bad or not self.bases:
            raise ValueError(f"unknown base kinds {bad}; choose from {BASE_KINDS}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.missing not in ("reject", "zero"):
            raise ValueError("missing must be 'reject' or 'zero'")
        if self.dm_loss not in ("absolute", "squared") or self.dm_horizon < 1:
            raise ValueError("dm_loss must be absolute|squared and dm_horizon >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        own = {f.name for f in fields(cls)} - {"model"}
        model_names = {f.name for f in fields(MetcrossConfig)}
        unknown = sorted(set(d) - own - model_names - {"model"})
        if unknown:
            raise ValueError(f"unknown config keys {unknown}")
        model = dict(d.pop("model", {}) or {})
        model.update({k: d.pop(k) for k in list(d) if k in model_names and k not in own})
        if "seed" in model:
            d.setdefault("seeds", [model.pop("seed")])
        if "base_kind" in model:
            d.setdefault("bases", [model.pop("base_kind")])
        if isinstance(d.get("models"), str):
            d["models"] = [m for m in d["models"].split(",") if m]
        return cls(model=MetcrossConfig.from_dict(model), **d)

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: not valid JSON ({e})") from None
        if not isinstance(d, dict):
            raise ValueError(f"{path}: expected a JSON object")
        d.update(overrides or {})
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "model"}
        out = {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}
        model = asdict(self.model)
        model.pop("seed")
        model.pop("base_kind")
        return {**out, **model}

    def config_hash(self) -> str:
        return config_hash(self.to_dict())

    def cells(self) -> list["Cell"]:
        return [Cell(self, m, b, d, s) for s in self.seeds for d in self.train_days
                for b in self.bases for m in self.models]


@dataclass(frozen=True)
class Cell:
    """One (model, base kind, training length, seed) grid point."""

    run: RunConfig
    model: str
    base_kind: str
    train_days: int
    seed: int

    @property
    def config(self) -> MetcrossConfig:
        return replace(self.run.model, seed=self.seed, base_kind=self.base_kind)

    @property
    def label(self) -> str:
        return _label(self.model, self.base_kind)

    @property
    def name(self) -> str:
        return f"{self.model}_{self.base_kind.lower()}_{self.train_days}d_seed{self.seed}"

    def to_dict(self) -> dict:
        return {"source": self.run.source, "target": self.run.target, "missing": self.run.missing,
                "test_days": self.run.test_days, "train_days": self.train_days, "model": self.model,
                **asdict(self.config)}

    def config_hash(self) -> str:
        return config_hash(self.to_dict())


@dataclass(eq=False)
class ExperimentBundle:
    config: RunConfig
    results: list[ExperimentResult]
    runs: dict[str, ModelRun]
    out_dir: Path | None = None

    def summary(self) -> pd.DataFrame:
        return summary_frame(self.results, self.config.config_hash())


def load_cities(run: RunConfig) -> tuple[City, City]:
    if not run.source or not run.target:
        raise DataError("both source and target city directories are required")
    return load_city(run.source, run.missing), load_city(run.target, run.missing)


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_predictions(run: ModelRun, task: TransferTask, path: Path, station_ids, timestamps) -> None:
    T, G = run.pred.shape
    pd.DataFrame({
        "station_id": np.tile(np.asarray(station_ids, dtype=object), T),
        "timestamp": np.repeat(np.datetime_as_string(timestamps, unit="m"), G),
        "predicted": run.pred.reshape(-1),
        "actual": run.actual.reshape(-1),
    }).to_csv(path, index=False, float_format="%.6f", lineterminator="\n")


def write_cell(cell: Cell, run: ModelRun, result: ExperimentResult, task: TransferTask,
               timestamps, out_dir: Path) -> None:
    """Write ``metrics.json``, ``predictions.csv`` and ``checkpoint.npz`` for one cell."""
    from .nn import save_checkpoint
    d = out_dir / cell.name
    d.mkdir(parents=True, exist_ok=True)
    payload = result.to_dict()
    payload["config"] = cell.to_dict()
    payload["history"] = [list(map(float, h)) if isinstance(h, (tuple, list)) else float(h)
                          for h in run.history]
    _dump(payload, d / "metrics.json")
    write_predictions(run, task, d / "predictions.csv", result.station_ids, timestamps)
    modules = run.model.modules() if hasattr(run.model, "modules") else {}
    save_checkpoint(d / "checkpoint.npz", modules,
                    {"config": cell.to_dict(), "config_hash": result.config_hash, "seed": cell.seed,
                     "kind": cell.model})


def summary_frame(results: Sequence[ExperimentResult], run_hash: str = "") -> pd.DataFrame:
    return pd.DataFrame([{
        "model": r.model, "label": r.label, "base_kind": r.base_kind, "train_days": r.train_days,
        "seed": r.seed, "mae": r.metrics.mae, "rmse": r.metrics.rmse,
        "config_hash": r.config_hash, "run_hash": run_hash,
    } for r in results], columns=["model", "label", "base_kind", "train_days", "seed", "mae", "rmse",
                                  "config_hash", "run_hash"])


def comparison_table(results: Sequence[ExperimentResult], run_hash: str = "") -> pd.DataFrame:
    """Models x (MAE, RMSE) x training lengths, averaged over seeds, with a Boost row per base.

    Boost compares METcross against NF; it is left empty when either is absent.
    """
    summary = summary_frame(results)
    if summary.empty:
        return pd.DataFrame()
    rows = []
    order = list(dict.fromkeys(summary["model"]))
    days = sorted(set(summary["train_days"]), reverse=True)
    seeds = ";".join(str(s) for s in sorted(set(summary["seed"])))
    for base in dict.fromkeys(summary["base_kind"]):
        sub = summary[summary["base_kind"] == base]
        means = sub.groupby(["model", "train_days"])[["mae", "rmse"]].mean()
        for model in order:
            if model not in set(sub["model"]):
                continue
            row = {"base_kind": base, "model": _label(model, base)}
            for d in days:
                for m in ("mae", "rmse"):
                    row[f"{d}d_{m.upper()}"] = means[m].get((model, d), np.nan)
            rows.append(row)
        row = {"base_kind": base, "model": "Boost"}
        for d in days:
            for m in ("mae", "rmse"):
                nf, mc = means[m].get(("nf", d)), means[m].get(("metcross", d))
                row[f"{d}d_{m.upper()}"] = boost(nf, mc) if nf is not None and mc is not None else np.nan
        rows.append(row)
    table = pd.DataFrame(rows)
    table["seeds"] = seeds
    table["run_hash"] = run_hash
    return table


def dm_frame(runs: dict[Cell, ModelRun], run: RunConfig, station_ids) -> pd.DataFrame:
    """Per-station DM trichotomy of METcross against every other model of the same grid slice."""
    rows = []
    groups: dict[tuple, dict[str, ModelRun]] = {}
    for cell, r in runs.items():
        groups.setdefault((cell.base_kind, cell.train_days, cell.seed), {})[cell.model] = r
    for (base, days, seed), members in groups.items():
        if "metcross" not in members:
            continue
        m_err = (members["metcross"].pred - members["metcross"].actual).T
        others = {k: (v.pred - v.actual).T for k, v in members.items() if k != "metcross"}
        if not others:
            continue
        labels, stats, pvals = dm_grid(m_err, others, run.dm_loss, run.dm_horizon)
        for j, name in enumerate(others):
            for g, sid in enumerate(station_ids):
                rows.append({"base_kind": base, "train_days": days, "seed": seed, "station_id": sid,
                             "baseline": _label(name, base), "statistic": stats[g, j],
                             "p_value": pvals[g, j], "result": labels[g, j]})
    out = pd.DataFrame(rows, columns=["base_kind", "train_days", "seed", "station_id", "baseline",
                                      "statistic", "p_value", "result"])
    out["run_hash"] = run.config_hash()
    return out


def best_frame(results: Sequence[ExperimentResult], run_hash: str = "") -> pd.DataFrame:
    rows = []
    groups: dict[tuple, list[ExperimentResult]] = {}
    for r in results:
        groups.setdefault((r.base_kind, r.train_days, r.seed), []).append(r)
    for (base, days, seed), members in groups.items():
        for metric in ("mae", "rmse"):
            counts = best_station_counts(
                {r.label: getattr(r.metrics, f"{metric}_per_station") for r in members})
            rows += [{"base_kind": base, "train_days": days, "seed": seed, "metric": metric.upper(),
                      "model": k, "count": v} for k, v in counts.items()]
    out = pd.DataFrame(rows, columns=["base_kind", "train_days", "seed", "metric", "model", "count"])
    out["run_hash"] = run_hash
    return out


def dry_run(run: RunConfig) -> list[str]:
    """One line per grid cell, in execution order."""
    return [f"{c.name}\t{c.label}\t{c.config_hash()}" for c in run.cells()]


def run_experiment(run: RunConfig, out_dir=None, cities: tuple[City, City] | None = None) -> ExperimentBundle:
    """Train and evaluate every grid cell; write per-cell and summary files when ``out_dir`` is set."""
    source, target = cities if cities is not None else load_cities(run)
    out = Path(out_dir) if out_dir is not None else None
    run_hash = run.config_hash()
    results: list[ExperimentResult] = []
    runs: dict[Cell, ModelRun] = {}
    station_ids = target.panel.stations.station_ids
    tasks: dict[int, TransferTask] = {}
    caches: dict[tuple, dict] = {}
    for cell in run.cells():
        stage = "prepare"
        try:
            if cell.train_days not in tasks:
                tasks[cell.train_days] = prepare_task(source, target, cell.train_days, run.test_days,
                                                      run.model.h)
            task = tasks[cell.train_days]
            stage = "train"
            log.info("running %s", cell.name)
            mr = run_model(task, cell.model, cell.config,
                           caches.setdefault((cell.train_days, cell.seed), {}))
            stage = "evaluate"
            metrics = mae_rmse(mr.pred.T, mr.actual.T)
            res = ExperimentResult(mr.label, cell.model, cell.base_kind, cell.train_days, cell.seed,
                                   cell.config_hash(), station_ids, metrics, task.test_range,
                                   {"run_hash": run_hash})
            if out is not None:
                stage = "write"
                _, t_te, _ = task.test.open("evaluate")
                write_cell(cell, mr, res, task, t_te.timestamps, out)
        except MetcrossError as e:
            raise with_context(e, f"{cell.name} stage {stage} (config {cell.config_hash()})")
        results.append(res)
        runs[cell] = mr
    bundle = ExperimentBundle(run, results, {c.name: r for c, r in runs.items()}, out)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _dump({"config": run.to_dict(), "config_hash": run_hash, "seeds": list(run.seeds)},
              out / "config.json")
        csv = dict(index=False, lineterminator="\n")
        summary_frame(results, run_hash).to_csv(out / "summary.csv", **csv)
        comparison_table(results, run_hash).to_csv(out / "table.csv", **csv)
        dm_frame(runs, run, station_ids).to_csv(out / "dm_grid.csv", **csv)
        best_frame(results, run_hash).to_csv(out / "best_stations.csv", **csv)
    return bundle
