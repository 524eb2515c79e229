import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from connectome_bench import bench, cli
from connectome_bench.data_io import SyntheticConfig, generate_synthetic

SMALL = {"n_subjects": 60, "n_roi": 8, "series_length": 32, "n_signal_edges": 4, "effect_size": 0.2, "seed": 1}


def small_config(models, runs=3, seed=0, **kw):
    return bench.ExperimentConfig(dataset={"synthetic": SMALL}, models=models, runs=runs, master_seed=seed, **kw)


@pytest.fixture(scope="module")
def small_ds():
    return generate_synthetic(SyntheticConfig(**SMALL))


# -- seeds and grid search ----------------------------------------------------------------------

def test_seed_scheme():
    assert bench.split_seed(7, 3) == 1010 and bench.init_seed(7, 3) == 2010


def test_grid_single_point():
    assert bench.grid_search(lambda p: 0.3, {"a": [5]}) == ({"a": 5}, 0.3)


def test_grid_tie_keeps_first_and_order():
    grid = {"a": [1, 2], "b": ["x", "y"]}
    assert bench.grid_points(grid) == [{"a": 1, "b": "x"}, {"a": 1, "b": "y"},
                                       {"a": 2, "b": "x"}, {"a": 2, "b": "y"}]
    assert bench.grid_search(lambda p: 1.0, grid)[0] == {"a": 1, "b": "x"}
    assert bench.grid_search(lambda p: float(p["a"] == 2), grid)[0] == {"a": 2, "b": "x"}


def test_grid_failing_points_skipped_and_aggregated():
    def score(p):
        if p["a"] == 1:
            raise RuntimeError("boom")
        return math.nan if p["a"] == 2 else 0.1
    assert bench.grid_search(score, {"a": [1, 2, 3]})[0] == {"a": 3}
    with pytest.raises(bench.GridSearchError) as exc:
        bench.grid_search(score, {"a": [1, 2]})
    assert len(exc.value.failures) == 2 and "boom" in str(exc.value)


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=12))
def test_grid_picks_argmax(scores):
    best, val = bench.grid_search(lambda p: scores[p["i"]], {"i": list(range(len(scores)))})
    assert val == max(scores) and best["i"] == scores.index(max(scores))


def test_known_dominant_point_selected():
    # measured: 10 of 10 master seeds pick n_features=60 over 1
    ds = generate_synthetic(SyntheticConfig(n_subjects=200, n_roi=20, series_length=64, n_signal_edges=20,
                                            effect_size=0.15, seed=3))
    hits = 0
    for ms in range(10):
        cfg = bench.ExperimentConfig({}, [bench.ModelEntry("lr", "logistic", {}, {"n_features": [1, 60]})],
                                     runs=1, master_seed=ms)
        hits += bench.run_benchmark(cfg, ds).models["lr"].best_params == {"n_features": 60}
    assert hits >= 8


# -- config ---------------------------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(bench.ConfigError):
        small_config([bench.ModelEntry("m", "nope")])
    with pytest.raises(bench.ConfigError):
        small_config([bench.ModelEntry("m", "logistic"), bench.ModelEntry("m", "svm")])
    with pytest.raises(bench.ConfigError):
        small_config([bench.ModelEntry("m", "logistic", {}, {"C": []})])
    with pytest.raises(bench.ConfigError):
        small_config([], runs=0)
    with pytest.raises(bench.ConfigError):
        bench.ExperimentConfig.from_dict({"models": []})


def test_config_roundtrip_and_hash(tmp_path):
    cfg = small_config([bench.ModelEntry("lr", "logistic", {"C": 1.0}, {"n_features": [4]})])
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    back = bench.ExperimentConfig.load(p)
    assert back.to_dict() == cfg.to_dict() and back.config_hash() == cfg.config_hash()
    assert small_config(cfg.models, seed=1).config_hash() != cfg.config_hash()


def test_default_grids():
    assert bench.default_grid("dual", 50) == bench.DUAL_GRID
    assert "n_features" in bench.default_grid("logistic", 10)
    assert set(bench.default_grid("gcn", 10)) <= {"n_layers", "hidden_dim", "learning_rate"} | set(bench.default_grid("gcn", 10))


# -- benchmark -----------------------------------------------------------------------------------------

def test_single_run_std_zero(small_ds):
    t = bench.run_benchmark(small_config([bench.ModelEntry("lr", "logistic", {}, {"n_features": [6]})], runs=1), small_ds)
    s = t.models["lr"]
    assert len(s.runs) == 1 and s.std == 0.0 and s.mean == s.runs[0].test_metric


def test_benchmark_deterministic_and_recomputable(small_ds):
    models = [bench.ModelEntry("lr", "logistic", {}, {"n_features": [4, 12]}),
              bench.ModelEntry("nb", "naive_bayes", {}, {"n_features": [6]})]
    a = bench.run_benchmark(small_config(models, runs=4), small_ds)
    b = bench.run_benchmark(small_config(models, runs=4), small_ds)
    assert a.to_dict("t") == b.to_dict("t")
    for s in a.models.values():
        vals = [r.test_metric for r in s.runs]
        assert [r.run for r in s.runs] == [0, 1, 2, 3]
        assert abs(s.mean - float(np.mean(vals))) <= 1e-12
        assert abs(s.std - float(np.std(vals, ddof=0))) <= 1e-12
        assert [r.seed for r in s.runs] == [bench.init_seed(0, r) for r in range(4)]
    assert 0 <= a.pairwise_p["lr|nb"] <= 1


def test_runs_use_distinct_splits_unless_fixed(small_ds):
    ctx = bench.BenchContext(small_ds)
    s0 = ctx.splits(bench.SplitSpec(seed=bench.split_seed(0, 0)))
    s1 = ctx.splits(bench.SplitSpec(seed=bench.split_seed(0, 1)))
    assert not np.array_equal(s0[2], s1[2])
    m = [bench.ModelEntry("lr", "logistic", {}, {"n_features": [6]})]
    fixed = bench.run_benchmark(small_config(m, runs=2, fixed_split=True), small_ds).models["lr"]
    assert len(fixed.runs) == 2


def test_all_points_fail_reported(small_ds):
    m = [bench.ModelEntry("bad", "logistic", {}, {"C": [-1.0]})]
    s = bench.run_benchmark(small_config(m, runs=2), small_ds).models["bad"]
    assert s.failed and not s.runs and math.isnan(s.mean)


def test_result_table_roundtrip(small_ds):
    t = bench.run_benchmark(small_config([bench.ModelEntry("lr", "logistic", {}, {"n_features": [6]})], runs=2), small_ds)
    d = t.to_dict("2026-01-01T00:00:00")
    assert bench.ResultTable.from_dict(json.loads(json.dumps(d))).to_dict("2026-01-01T00:00:00") == d


# -- report -----------------------------------------------------------------------------------------------

def _sweep(model, ks, vals):
    from connectome_bench.graph_models import SweepResult, k_key
    return SweepResult(model, list(ks), {k_key(k): {"mean": float(np.mean(v)), "std": float(np.std(v)), "runs": list(v)}
                                         for k, v in zip(ks, vals)})


def test_emit_empty_sweep_header_only(tmp_path):
    bench.emit_report(None, [], None, tmp_path, "h", 0)
    rows = list(csv.reader(open(tmp_path / "density_sweep.csv")))
    assert rows == [["model", "K", "mean", "std", "n_runs", "config_hash", "master_seed"]]


def test_emit_sweep_rows(tmp_path):
    ks = [0.0, 5.0, 20.0]
    sweeps = [_sweep("gcn", ks, [[0.6, 0.7]] * 3), _sweep("gat", ks, [[0.5, 0.9]] * 3)]
    bench.emit_report(None, sweeps, None, tmp_path, "abc", 3)
    rows = list(csv.DictReader(open(tmp_path / "density_sweep.csv")))
    assert len(rows) == 6
    assert {r["config_hash"] for r in rows} == {"abc"} and {r["master_seed"] for r in rows} == {"3"}
    assert float(rows[0]["std"]) == pytest.approx(0.05, abs=1e-12)


def test_emit_results_byte_identical_except_timestamp(tmp_path, small_ds):
    m = [bench.ModelEntry("lr", "logistic", {}, {"n_features": [6]})]
    t1 = bench.run_benchmark(small_config(m, runs=2), small_ds)
    t2 = bench.run_benchmark(small_config(m, runs=2), small_ds)
    bench.emit_report(t1, [], None, tmp_path / "a", timestamp="T1")
    bench.emit_report(t2, [], None, tmp_path / "b", timestamp="T1")
    for name in ("results.json", "results.csv", "density_sweep.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    d = json.loads((tmp_path / "a" / "results.json").read_text())
    assert d["master_seed"] == 0 and d["config_hash"] == t1.config_hash


def test_emit_report_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        bench.emit_report(None, [], None, blocker / "sub", "h", 0)


# -- CLI ----------------------------------------------------------------------------------------------------

def _write_cfg(tmp_path, **extra):
    d = {"dataset": {"synthetic": SMALL}, "models": [{"id": "lr", "kind": "logistic", "grid": {"n_features": [6]}}],
         "runs": 2, "train": {"epochs": 3}, **extra}
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(d))
    return p


def test_cli_exit_codes(tmp_path, capsys):
    assert cli.main([]) == 2
    assert cli.main(["bogus"]) == 2
    assert cli.main(["bench"]) == 2
    assert cli.main(["bench", "--config", str(tmp_path / "missing.json")]) == 2
    (tmp_path / "bad.json").write_text("{not json")
    assert cli.main(["bench", "--config", str(tmp_path / "bad.json")]) == 2
    cfg = _write_cfg(tmp_path)
    assert cli.main(["bench", "--config", str(cfg), "--runs", "0"]) == 2
    assert cli.main(["interpret", "--config", str(cfg), "--checkpoint", str(tmp_path / "none.ckpt")]) == 2


def test_cli_bench_and_report(tmp_path):
    cfg = _write_cfg(tmp_path)
    out = tmp_path / "out"
    assert cli.main(["bench", "--config", str(cfg), "--out", str(out), "--seed", "4"]) == 0
    d = json.loads((out / "results.json").read_text())
    assert d["master_seed"] == 4 and len(d["models"]["lr"]["runs"]) == 2
    assert cli.main(["report", "--from", str(out), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "results.json").exists()
    assert cli.main(["report", "--from", str(tmp_path / "nowhere"), "--out", str(tmp_path / "r2")]) == 2


def test_cli_bench_failure_exit(tmp_path):
    d = json.loads(_write_cfg(tmp_path).read_text())
    d["models"][0]["grid"] = {"C": [-1.0]}
    p = tmp_path / "fail.json"
    p.write_text(json.dumps(d))
    assert cli.main(["bench", "--config", str(p), "--out", str(tmp_path / "o")]) == 3
    assert json.loads((tmp_path / "o" / "results.json").read_text())["models"]["lr"]["failures"]


def test_cli_synth_roundtrip(tmp_path):
    from connectome_bench.data_io import load_dataset
    (tmp_path / "s.json").write_text(json.dumps(SMALL))
    assert cli.main(["synth", "--config", str(tmp_path / "s.json"), "--out", str(tmp_path / "ds")]) == 0
    ds = load_dataset(tmp_path / "ds" / "manifest.json")
    ref = generate_synthetic(SyntheticConfig(**SMALL))
    assert ds.ids == ref.ids and np.allclose(ds.subjects[0].bold.values, ref.subjects[0].bold.values, atol=1e-12)
    truth = json.loads((tmp_path / "ds" / "ground_truth.json").read_text())
    assert len(truth["planted_pairs"]) == SMALL["n_signal_edges"]


@pytest.mark.filterwarnings("ignore:graph too small")
def test_cli_train_dual_and_interpret(tmp_path):
    d = json.loads(_write_cfg(tmp_path).read_text())
    d["models"] = [{"id": "dual", "kind": "dual", "params": {"hidden_dim": 4, "embed_dim": 4, "phase1_epochs": 1}}]
    p = tmp_path / "dual.json"
    p.write_text(json.dumps(d))
    out = tmp_path / "o"
    assert cli.main(["train-dual", "--config", str(p), "--out", str(out)]) == 0
    assert (out / "dual.ckpt").exists() and (out / "dual_history.json").exists()
    assert cli.main(["interpret", "--config", str(p), "--out", str(out)]) == 0
    for kind in ("attention", "lm_weight"):
        assert (out / f"edge_map_{kind}.csv").exists()
