"""Experiment orchestration: grid search, multi-run benchmarks, report files.

Seeds for run ``r`` derive from the master seed by fixed offsets:
split seed ``master + 1000 + r`` and model/initialization seed
``master + 2000 + r``. Grid search runs once on the run-0 split and the
chosen point is reused for every run unless ``per_run_search`` is set.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import math
import shutil
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import baselines
from .data_io import (CLASSIFICATION, Dataset, SplitSpec, SyntheticConfig, connectomes,
                      generate_synthetic, load_dataset, split_indices, truncate_dataset)
from .graph_models import ARCHITECTURES, GNNSpec, SweepResult, density_sweep
from .graph_models import train as train_gnn
from .metrics import evaluate, metric_name, welch_test
from .training import TrainConfig

log = logging.getLogger(__name__)

SPLIT_OFFSET = 1000
INIT_OFFSET = 2000
GNN_KINDS = set(ARCHITECTURES) | {"neurograph", "neurograph_nores"}
DUAL_KIND = "dual"
KNOWN_KINDS = baselines.ALL_KINDS | GNN_KINDS | {DUAL_KIND}
DUAL_LEARNING_RATE = 1e-2

# dual-pathway value sets; the learning rate set is shared by all deep models
DUAL_GRID = {"phase1_epochs": [10, 20, 50], "n_layers": [2, 3, 4], "hidden_dim": [32, 64, 128],
             "learning_rate": [1e-4, 5e-4, 1e-3, 1e-2]}
GNN_GRIDS = {
    "gcn": {"n_layers": [2, 3], "hidden_dim": [32, 128, 256], "readout": ["concat", "mean"]},
    "gat": {"n_layers": [2, 3], "hidden_dim": [32, 128, 256], "heads": [2, 4]},
    "gin": {"n_layers": [2, 3], "hidden_dim": [32, 128, 256], "epsilon": [0.0, 0.2, 0.5]},
    "sage": {"n_layers": [2, 3], "hidden_dim": [32, 128, 256], "aggregator": ["mean", "max"]},
    "neurograph": {"n_layers": [2, 3], "hidden_dim": [32, 64, 128]},
    "neurograph_nores": {"n_layers": [2, 3], "hidden_dim": [32, 64, 128]},
}

# published full-scale means on restricted cohorts (documentation only, never asserted)
REFERENCE_SCORES = {
    "ABIDE": {"dual_pathway": 0.732, "best_baseline": 0.737, "metric": "auroc"},
    "PNC": {"dual_pathway": 0.834, "best_baseline": 0.827, "metric": "auroc"},
    "HCP": {"dual_pathway": 0.247, "best_baseline": 0.270, "metric": "pearson_r"},
    "ABCD": {"dual_pathway": 0.358, "best_baseline": 0.348, "metric": "pearson_r"},
}


class ConfigError(ValueError):
    pass


class GridSearchError(RuntimeError):
    def __init__(self, failures: list[tuple[dict, str]]):
        self.failures = failures
        lines = "; ".join(f"{p}: {e}" for p, e in failures[:5])
        super().__init__(f"all {len(failures)} grid points failed ({lines})")


def split_seed(master_seed: int, run: int) -> int:
    return master_seed + SPLIT_OFFSET + run


def init_seed(master_seed: int, run: int) -> int:
    return master_seed + INIT_OFFSET + run


# -- configuration ---------------------------------------------------------------

@dataclass
class ModelEntry:
    id: str
    kind: str
    params: dict[str, Any] = field(default_factory=dict)
    grid: dict[str, list] | None = None  # None means the default grid for the kind


@dataclass
class ExperimentConfig:
    dataset: dict[str, Any]
    models: list[ModelEntry]
    split: SplitSpec = SplitSpec()
    runs: int = 10
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "results"
    master_seed: int = 0
    fixed_split: bool = False
    per_run_search: bool = False
    sweep: dict[str, Any] = field(default_factory=dict)
    raw: dict[str, Any] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        for m in self.models:
            if m.kind not in KNOWN_KINDS:
                raise ConfigError(f"model {m.id!r}: unknown kind {m.kind!r}")
            for key, values in (m.grid or {}).items():
                if not isinstance(values, list) or not values:
                    raise ConfigError(f"model {m.id!r}: grid for {key!r} must be a nonempty list")
        ids = [m.id for m in self.models]
        if len(set(ids)) != len(ids):
            raise ConfigError("model ids must be unique")

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        try:
            models = [ModelEntry(m.get("id", m["kind"]), m["kind"], dict(m.get("params", {})),
                                 None if m.get("grid") is None else dict(m["grid"]))
                      for m in d.get("models", [])]
            dataset = dict(d["dataset"])
            if "manifest" in dataset and base_dir is not None:
                mp = Path(dataset["manifest"])
                dataset["manifest"] = str(mp if mp.is_absolute() else base_dir / mp)
            return cls(
                dataset=dataset,
                models=models,
                split=SplitSpec(**d.get("split", {})),
                runs=int(d.get("runs", 10)),
                train=TrainConfig(**d.get("train", {})),
                output_dir=d.get("output_dir", "results"),
                master_seed=int(d.get("master_seed", 0)),
                fixed_split=bool(d.get("fixed_split", False)),
                per_run_search=bool(d.get("per_run_search", False)),
                sweep=dict(d.get("sweep", {})),
                raw=d,
            )
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid experiment config: {exc}") from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(d, path.parent)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "models": [asdict(m) for m in self.models],
            "split": asdict(self.split),
            "runs": self.runs,
            "train": self.train.to_dict(),
            "output_dir": self.output_dir,
            "master_seed": self.master_seed,
            "fixed_split": self.fixed_split,
            "per_run_search": self.per_run_search,
            "sweep": self.sweep,
        }

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def load_experiment_dataset(source: dict) -> Dataset:
    if "manifest" in source:
        ds = load_dataset(source["manifest"])
    elif "synthetic" in source:
        ds = generate_synthetic(SyntheticConfig(**source["synthetic"]))
    else:
        raise ConfigError("dataset needs either 'manifest' or 'synthetic'")
    if source.get("truncate"):
        ds = truncate_dataset(ds, int(source["truncate"]))
    return ds


# -- per-model runs ----------------------------------------------------------------

@dataclass
class RunResult:
    model_id: str
    run: int
    seed: int
    val_metric: float
    test_metric: float
    best_epoch: int | None = None
    params: dict[str, Any] = field(default_factory=dict)


class BenchContext:
    """Dataset plus cached connectomes and feature matrix."""

    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        self.task = dataset.task
        conns = connectomes(dataset)
        self.conn_cache = dict(zip(dataset.ids, conns))
        iu = np.triu_indices(dataset.n_roi, k=1)
        self.X = conns[:, iu[0], iu[1]]
        self.y = dataset.targets

    def splits(self, spec: SplitSpec):
        return split_indices(len(self.dataset), spec)


def run_model(ctx: BenchContext, entry: ModelEntry, params: dict, indices, seed: int,
              train_cfg: TrainConfig) -> RunResult:
    """Fit one configuration on one split; returns val and test metrics."""
    tr, va, te = indices
    kind, task = entry.kind, ctx.task
    default_lr = DUAL_LEARNING_RATE if kind == DUAL_KIND else train_cfg.learning_rate
    cfg = replace(train_cfg, seed=seed,
                  learning_rate=params.get("learning_rate", default_lr),
                  epochs=params.get("epochs", train_cfg.epochs))

    if kind in baselines.ALL_KINDS:
        hp = dict(params)
        if kind in baselines.MLP_KINDS:
            hp.update(epochs=cfg.epochs, batch_size=cfg.batch_size, weight_decay=cfg.weight_decay,
                      learning_rate=cfg.learning_rate, dtype=cfg.dtype)
        spec = baselines.EstimatorSpec(kind, task, hp, seed)
        fitted = baselines.fit_estimator(spec, ctx.X[tr], ctx.y[tr], ctx.X[va], ctx.y[va])
        val = evaluate(baselines.predict(fitted, ctx.X[va]), ctx.y[va], task)
        test = evaluate(baselines.predict(fitted, ctx.X[te]), ctx.y[te], task)
        best = fitted.history.best_epoch if fitted.history is not None else None
        return RunResult(entry.id, -1, seed, val, test, best, params)

    ds = ctx.dataset
    splits = (ds.subset(tr), ds.subset(va), ds.subset(te))
    if kind in GNN_KINDS:
        arch = {"neurograph": "gcn", "neurograph_nores": "gcn"}.get(kind, kind)
        fields = {k: v for k, v in params.items() if k in GNNSpec.__dataclass_fields__}
        fields.setdefault("architecture", arch)
        if kind == "neurograph":
            fields.setdefault("residual", True)
        if kind == "neurograph_nores":
            fields.setdefault("layer_concat", True)
        spec = GNNSpec(**{**fields, "seed": seed})
        res = train_gnn(spec, splits, cfg, conn_cache=ctx.conn_cache)
        return RunResult(entry.id, -1, seed, res.history.best_val_metric, res.test_metric,
                         res.history.best_epoch, params)

    from .dual_pathway import build_model, phased_train

    model = build_model(
        ds.n_roi, task,
        hidden_dim=params.get("hidden_dim", 32), n_layers=params.get("n_layers", 2),
        heads=params.get("heads", 2), embed_dim=params.get("embed_dim", 32),
        density_k=params.get("density_k", 5.0), seed=seed,
        standardize_u=params.get("standardize_u", True),
    )
    phase1 = params.get("phase1_epochs", 10)
    _, history, test = phased_train(model, splits, cfg, phase1)
    return RunResult(entry.id, -1, seed, history.best_val_metric, test, history.best_epoch, params)


def grid_points(grid: dict[str, list]) -> list[dict]:
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def grid_search(score_fn: Callable[[dict], float], grid: dict[str, list]) -> tuple[dict, float]:
    """Maximize ``score_fn`` over the grid; ties keep the earlier grid point."""
    points = grid_points(grid)
    if not points:
        raise ValueError("grid is empty")
    best, best_score, failures = None, -math.inf, []
    for point in points:
        try:
            score = float(score_fn(point))
        except Exception as exc:  # a failing point must not sink the search
            failures.append((point, f"{type(exc).__name__}: {exc}"))
            log.warning("grid point %s failed: %s", point, exc)
            continue
        if not math.isfinite(score):
            failures.append((point, f"non-finite score {score}"))
            continue
        if best is None or score > best_score:
            best, best_score = point, score
    if best is None:
        raise GridSearchError(failures)
    return best, best_score


def default_grid(kind: str, n_roi: int) -> dict[str, list]:
    """Value sets searched when a model entry gives no grid."""
    if kind == DUAL_KIND:
        return dict(DUAL_GRID)
    if kind in GNN_KINDS:
        return {**GNN_GRIDS[kind], "learning_rate": list(DUAL_GRID["learning_rate"])}
    grid = dict(baselines.DEFAULT_GRIDS.get(kind, {}))
    if kind in baselines.SELECTABLE_KINDS:
        grid["n_features"] = baselines.feature_count_grid(n_roi)
    return grid


# -- benchmark -------------------------------------------------------------------------

@dataclass
class ModelSummary:
    mean: float
    std: float
    runs: list[RunResult]
    best_params: dict[str, Any]
    failures: list[dict] = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return bool(self.failures)


@dataclass
class ResultTable:
    task: str
    metric: str
    models: dict[str, ModelSummary]
    pairwise_p: dict[str, float]
    config_hash: str = ""
    master_seed: int = 0

    def to_dict(self, timestamp: str | None = None) -> dict:
        return {
            "task": self.task,
            "metric": self.metric,
            "config_hash": self.config_hash,
            "master_seed": self.master_seed,
            "significance_test": "welch_two_sided",
            "seed_scheme": {"split": f"master+{SPLIT_OFFSET}+run", "init": f"master+{INIT_OFFSET}+run"},
            "models": {
                mid: {"mean": s.mean, "std": s.std, "best_params": s.best_params,
                      "failed": s.failed, "failures": s.failures,
                      "runs": [asdict(r) for r in s.runs]}
                for mid, s in self.models.items()
            },
            "pairwise_p": self.pairwise_p,
            "timestamp": timestamp,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ResultTable":
        models = {
            mid: ModelSummary(m["mean"], m["std"], [RunResult(**r) for r in m["runs"]],
                              m.get("best_params", {}), m.get("failures", []))
            for mid, m in d["models"].items()
        }
        return cls(d["task"], d["metric"], models, d.get("pairwise_p", {}),
                   d.get("config_hash", ""), d.get("master_seed", 0))


def summarize(values: list[float]) -> tuple[float, float]:
    """Mean and population standard deviation (0 for a single run)."""
    if not values:
        return float("nan"), float("nan")
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def run_benchmark(config: ExperimentConfig, dataset: Dataset | None = None) -> ResultTable:
    dataset = dataset or load_experiment_dataset(config.dataset)
    ctx = BenchContext(dataset)
    master = config.master_seed
    summaries: dict[str, ModelSummary] = {}

    for entry in config.models:
        grid = default_grid(entry.kind, dataset.n_roi) if entry.grid is None else dict(entry.grid)
        chosen: dict = {}

        def search(run: int) -> dict:
            idx = ctx.splits(replace(config.split, seed=split_seed(master, run)))
            if not grid:
                return {}
            point, _ = grid_search(
                lambda p: run_model(ctx, entry, {**entry.params, **p}, idx, init_seed(master, run),
                                    config.train).val_metric,
                grid)
            return point

        runs, failures = [], []
        try:
            chosen = search(0)
        except GridSearchError as exc:
            summaries[entry.id] = ModelSummary(float("nan"), float("nan"), [], {},
                                               [{"run": 0, "error": str(exc)}])
            continue
        for r in range(config.runs):
            point = search(r) if (config.per_run_search and r > 0) else chosen
            s_seed = split_seed(master, 0 if config.fixed_split else r)
            idx = ctx.splits(replace(config.split, seed=s_seed))
            params = {**entry.params, **point}
            try:
                res = run_model(ctx, entry, params, idx, init_seed(master, r), config.train)
            except Exception as exc:
                log.error("model %s run %d failed: %s", entry.id, r, exc)
                failures.append({"run": r, "error": f"{type(exc).__name__}: {exc}"})
                continue
            res.run = r
            runs.append(res)
            log.info("%s run %d: val %.4f test %.4f", entry.id, r, res.val_metric, res.test_metric)
        mean, std = summarize([r.test_metric for r in runs])
        summaries[entry.id] = ModelSummary(mean, std, runs, chosen, failures)

    pairwise = {}
    ids = [m for m, s in summaries.items() if len(s.runs) >= 2]
    for a, b in itertools.combinations(ids, 2):
        pairwise[f"{a}|{b}"] = welch_test([r.test_metric for r in summaries[a].runs],
                                          [r.test_metric for r in summaries[b].runs])
    return ResultTable(dataset.task, metric_name(dataset.task), summaries, pairwise,
                       config.config_hash(), master)


def run_sweep(config: ExperimentConfig, dataset: Dataset | None = None) -> list[SweepResult]:
    """Density sweep for every model listed under ``config.sweep``."""
    dataset = dataset or load_experiment_dataset(config.dataset)
    sweep = config.sweep or {}
    k_values = sweep.get("k_values", [0, 5, 20, 50, 100])
    entries = sweep.get("models") or [{"id": "gcn", "kind": "gcn"}]
    out = []
    for m in entries:
        kind = m.get("kind", "gcn")
        if kind not in GNN_KINDS:
            raise ConfigError(f"sweep model {m!r}: density sweeps need a graph model kind")
        arch = {"neurograph": "gcn", "neurograph_nores": "gcn"}.get(kind, kind)
        fields = {k: v for k, v in m.get("params", {}).items() if k in GNNSpec.__dataclass_fields__}
        fields.setdefault("architecture", arch)
        if kind == "neurograph":
            fields.setdefault("residual", True)
        if kind == "neurograph_nores":
            fields.setdefault("layer_concat", True)
        train_cfg = replace(config.train, **{k: v for k, v in m.get("params", {}).items()
                                             if k in ("learning_rate", "epochs")})
        out.append(density_sweep(GNNSpec(**fields), dataset, k_values, config.runs, train_cfg,
                                 config.master_seed, config.split, m.get("id", kind)))
    return out


# -- report emission ---------------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def write_density_csv(sweeps: list[SweepResult], path: Path, config_hash: str, master_seed: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "K", "mean", "std", "n_runs", "config_hash", "master_seed"])
        for s in sweeps:
            for k in s.k_values:
                cell = s.per_k[f"{float(k):g}"]
                w.writerow([s.model, f"{float(k):g}", _fmt(cell["mean"]), _fmt(cell["std"]),
                            len(cell["runs"]), config_hash, master_seed])


def degradation_summary(sweep: SweepResult) -> dict:
    """Whether mean performance falls as K grows (reported, never asserted)."""
    means = [sweep.per_k[f"{float(k):g}"]["mean"] for k in sweep.k_values]
    diffs = np.diff(means)
    return {"model": sweep.model, "means": means,
            "monotone_nonincreasing": bool(np.all(diffs <= 0)),
            "k0_minus_kmax": float(means[0] - means[-1]) if means else float("nan")}


def emit_report(table: ResultTable | None, sweeps: list[SweepResult], interpret_dirs: dict[str, Path] | None,
                out_dir, config_hash: str | None = None, master_seed: int | None = None,
                timestamp: str | None = None) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    chash = config_hash if config_hash is not None else (table.config_hash if table else "")
    seed = master_seed if master_seed is not None else (table.master_seed if table else 0)
    stamp = timestamp or time.strftime("%Y-%m-%dT%H:%M:%S")
    written = []

    if table is not None:
        p = out / "results.json"
        payload = table.to_dict(timestamp=stamp)
        payload["config_hash"], payload["master_seed"] = chash, seed
        payload["density_trend"] = [degradation_summary(s) for s in sweeps]
        p.write_text(json.dumps(payload, indent=2, sort_keys=True))
        written.append(p)
        p = out / "results.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "mean", "std", "n_runs", "failed", "config_hash", "master_seed"])
            for mid, s in table.models.items():
                w.writerow([mid, _fmt(s.mean), _fmt(s.std), len(s.runs), int(s.failed), chash, seed])
        written.append(p)

    p = out / "density_sweep.csv"
    write_density_csv(sweeps, p, chash, seed)
    written.append(p)

    for name, src in (interpret_dirs or {}).items():
        dst = out / "interpret" / name
        try:
            shutil.copytree(src, dst, dirs_exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot copy interpret bundle {src} -> {dst}: {exc}") from exc
        (dst / "provenance.json").write_text(
            json.dumps({"config_hash": chash, "master_seed": seed, "source": str(src)}, indent=2, sort_keys=True))
        written.append(dst)
    return written
