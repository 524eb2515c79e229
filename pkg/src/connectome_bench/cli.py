"""Command-line entry point: ``connectome-bench <subcommand> [options]``.

Exit codes: 0 success, 2 configuration or input error, 3 run failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import bench, interpret
from .data_io import SyntheticConfig, generate_synthetic_with_truth, save_dataset
from .graph_models import SweepResult

log = logging.getLogger("connectome_bench")

EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 2, 3
CHECKPOINT_NAME = "dual.ckpt"


class RunFailure(RuntimeError):
    pass


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise bench.ConfigError(f"cannot read {path}: {exc}") from exc


def _experiment(args) -> bench.ExperimentConfig:
    if not args.config:
        raise bench.ConfigError(f"`{args.command}` needs --config")
    cfg = bench.ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed)
    if args.runs is not None:
        if args.runs < 1:
            raise bench.ConfigError("--runs must be >= 1")
        cfg = replace(cfg, runs=args.runs)
    return cfg


def _out_dir(args, cfg: bench.ExperimentConfig | None = None) -> Path:
    return Path(args.out or (cfg.output_dir if cfg else "results"))


def _dataset(cfg: bench.ExperimentConfig):
    try:
        return bench.load_experiment_dataset(cfg.dataset)
    except (OSError, ValueError, TypeError) as exc:
        raise bench.ConfigError(f"cannot load dataset: {exc}") from exc


# -- subcommands -------------------------------------------------------------------

def cmd_synth(args) -> int:
    raw = _read_json(args.config) if args.config else {}
    # accept either a bare synthetic config or a full experiment config
    raw = raw.get("dataset", {}).get("synthetic", raw) if "dataset" in raw else raw
    try:
        scfg = SyntheticConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise bench.ConfigError(f"invalid synthetic config: {exc}") from exc
    if args.seed is not None:
        scfg = replace(scfg, seed=args.seed)
    out = _out_dir(args)
    synth = generate_synthetic_with_truth(scfg)
    manifest = save_dataset(synth.dataset, out)
    truth = {"config": scfg.to_dict(), "planted_pairs": [list(p) for p in synth.planted_pairs],
             "planted_signs": synth.planted_signs}
    (out / "ground_truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True))
    print(manifest)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _experiment(args)
    ds = _dataset(cfg)
    table = bench.run_benchmark(cfg, ds)
    bench.emit_report(table, [], None, _out_dir(args, cfg))
    for mid, s in table.models.items():
        flag = " (FAILED runs: %d)" % len(s.failures) if s.failed else ""
        print(f"{mid}: {table.metric} {s.mean:.4f} +/- {s.std:.4f}{flag}")
    if any(s.failed for s in table.models.values()):
        raise RunFailure("one or more model runs failed; see results.json")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _experiment(args)
    ds = _dataset(cfg)
    sweeps = bench.run_sweep(cfg, ds)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    for s in sweeps:
        (out / f"sweep_{s.model}.json").write_text(s.to_json())
    bench.emit_report(None, sweeps, None, out, cfg.config_hash(), cfg.master_seed)
    for s in sweeps:
        print(json.dumps(bench.degradation_summary(s)))
    return EXIT_OK


def _dual_entry(cfg: bench.ExperimentConfig) -> bench.ModelEntry:
    for m in cfg.models:
        if m.kind == bench.DUAL_KIND:
            return m
    return bench.ModelEntry("dual", bench.DUAL_KIND, {}, {})


def cmd_train_dual(args) -> int:
    from .dual_pathway import build_model, phased_train, save_checkpoint

    cfg = _experiment(args)
    ds = _dataset(cfg)
    entry = _dual_entry(cfg)
    params = dict(entry.params)
    seed = bench.init_seed(cfg.master_seed, 0)
    split = replace(cfg.split, seed=bench.split_seed(cfg.master_seed, 0))
    ctx_idx = bench.split_indices(len(ds), split)
    splits = tuple(ds.subset(i) for i in ctx_idx)
    train_cfg = replace(cfg.train, seed=seed,
                        learning_rate=params.get("learning_rate", bench.DUAL_LEARNING_RATE),
                        epochs=params.get("epochs", cfg.train.epochs))
    model = build_model(ds.n_roi, ds.task, hidden_dim=params.get("hidden_dim", 32),
                        n_layers=params.get("n_layers", 2), heads=params.get("heads", 2),
                        embed_dim=params.get("embed_dim", 32), density_k=params.get("density_k", 5.0),
                        seed=seed, standardize_u=params.get("standardize_u", True))
    try:
        model, history, test = phased_train(model, splits, train_cfg, params.get("phase1_epochs", 10))
    except ValueError as exc:
        raise bench.ConfigError(str(exc)) from exc
    out = _out_dir(args, cfg)
    extra = {
        "config_hash": cfg.config_hash(), "master_seed": cfg.master_seed, "test_metric": test,
        "split_ids": {name: list(s.ids) for name, s in zip(("train", "val", "test"), splits)},
        "train": train_cfg.to_dict(),
    }
    path = save_checkpoint(model, out / CHECKPOINT_NAME, extra)
    (out / "dual_history.json").write_text(json.dumps(history.to_dict(), indent=2, sort_keys=True))
    print(f"{path} test {bench.metric_name(ds.task)} {test:.4f}")
    return EXIT_OK


def cmd_interpret(args) -> int:
    from .dual_pathway import load_checkpoint

    cfg = _experiment(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else _out_dir(args, cfg) / CHECKPOINT_NAME
    try:
        model, header = load_checkpoint(ckpt)
    except (OSError, ValueError) as exc:
        raise bench.ConfigError(f"cannot load checkpoint {ckpt}: {exc}") from exc
    ds = _dataset(cfg)
    test_ids = header.get("extra", {}).get("split_ids", {}).get("test")
    if test_ids:
        pos = {sid: k for k, sid in enumerate(ds.ids)}
        missing = [s for s in test_ids if s not in pos]
        if missing:
            raise bench.ConfigError(f"checkpoint test subjects missing from dataset: {missing[:5]}")
        ds = ds.subset([pos[s] for s in test_ids])
    if ds.n_roi != model.config.n_roi:
        raise bench.ConfigError(f"dataset has {ds.n_roi} ROIs, checkpoint expects {model.config.n_roi}")
    atlas = interpret.load_atlas(args.atlas) if args.atlas else interpret.round_robin_atlas(ds.n_roi)
    maps = {
        interpret.ATTENTION: interpret.mean_attention_map(model, ds),
        interpret.LM_WEIGHT: interpret.lm_weight_map(model),
    }
    out = _out_dir(args, cfg)
    meta = {"checkpoint": str(ckpt), "n_subjects": len(ds), "config_hash": cfg.config_hash(),
            "master_seed": cfg.master_seed}
    written = interpret.write_report_bundle(out, maps, atlas,
                                            null_config=interpret.NullConfig(seed=cfg.master_seed),
                                            louvain_seed=cfg.master_seed, metadata=meta)
    for p in written:
        print(p)
    return EXIT_OK


def cmd_report(args) -> int:
    sources = [Path(p) for p in (args.inputs or [])]
    if not sources:
        raise bench.ConfigError("`report` needs at least one --from directory")
    table, sweeps, bundles = None, [], {}
    for src in sources:
        if not src.is_dir():
            raise bench.ConfigError(f"{src} is not a directory")
        if (src / "results.json").exists():
            table = bench.ResultTable.from_dict(_read_json(src / "results.json"))
        for p in sorted(src.glob("sweep_*.json")):
            sweeps.append(SweepResult.from_dict(_read_json(p)))
        for d in sorted([src, *[c for c in src.iterdir() if c.is_dir()]]):
            if any(d.glob("edge_map_*.csv")):
                bundles[d.name] = d
    cfg = _experiment(args) if args.config else None
    chash = cfg.config_hash() if cfg else None
    seed = cfg.master_seed if cfg else args.seed
    for p in bench.emit_report(table, sweeps, bundles, Path(args.out or "report"), chash, seed):
        print(p)
    return EXIT_OK


COMMANDS = {
    "synth": (cmd_synth, "write a synthetic dataset (manifest + per-subject CSV)"),
    "bench": (cmd_bench, "grid search and multi-run benchmark"),
    "sweep": (cmd_sweep, "graph-density sweep"),
    "train-dual": (cmd_train_dual, "phased training of the dual-pathway model, saves a checkpoint"),
    "interpret": (cmd_interpret, "interpretability reports from a checkpoint"),
    "report": (cmd_report, "collect results, sweeps and reports into one directory"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="connectome-bench", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, helptext) in COMMANDS.items():
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--runs", type=int, help="override the number of runs")
        if name == "interpret":
            p.add_argument("--checkpoint", help=f"checkpoint file (default <out>/{CHECKPOINT_NAME})")
            p.add_argument("--atlas", help="CSV with roi_index,roi_label,system")
        if name == "report":
            p.add_argument("--from", dest="inputs", nargs="+", help="directories with earlier outputs")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = COMMANDS[args.command][0]
    try:
        return handler(args)
    except bench.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.debug("run failure", exc_info=True)
        print(f"run failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
