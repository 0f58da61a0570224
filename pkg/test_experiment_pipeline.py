"""
Campaign harness, run storage and the command line
"""
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
import torch

import app
import experiment_pipeline
from config import ConfigError, checkpoint_hash, config_hash
from experiment_pipeline import (
    ExperimentSpec,
    cell_configs,
    check_acceptance,
    check_degeneracy,
    check_ordering,
    check_trend,
    run_experiment,
    summarize,
)
from qmix import QmixLearner
from storage_utils import RunStorage, load_checkpoint, read_csv, read_csv_meta, write_csv

METRIC_COLUMNS = ["algorithm", "axis", "value", "seed", "total_average_aoi", "collision_count",
                  "mean_residual_energy", "config_hash"]


def synthetic_metrics(tmp_path, medians, axis="", seeds=(0, 1, 2), spread=0.1):
    """metrics.csv with one row per (value, algorithm, seed) around the given medians"""
    rows = []
    for (value, algorithm), median in medians.items():
        for k, seed in enumerate(seeds):
            offset = (k - (len(seeds) - 1) / 2) * spread
            rows.append([algorithm, axis, value, seed, median + offset, 0, 1000.0, "abc"])
    path = tmp_path / "metrics.csv"
    write_csv(pd.DataFrame(rows, columns=METRIC_COLUMNS), path, "metrics", {"config_hash": "abc"})
    return path


# ===========================
# Specs and sweep cells
# ===========================

def test_sweep_axes_map_onto_configs(small_cfg, tiny_hyper):
    spec = ExperimentSpec(base=small_cfg, hyper=tiny_hyper, axis="M", values=(1, 2), seeds=(0, 1, 2))
    cfg, _ = cell_configs(spec, 1)
    assert cfg.num_uavs == 1 and len(cfg.start_positions) == 1

    spec = ExperimentSpec(base=small_cfg, hyper=tiny_hyper, axis="E_MAX", values=(8000,), seeds=(0, 1, 2))
    cfg, _ = cell_configs(spec, 8000)
    assert cfg.e_max == 8000 and cfg.layout == "loop"
    assert cfg.start_positions == cfg.stop_positions

    spec = ExperimentSpec(base=small_cfg, hyper=tiny_hyper, axis="ALPHA", values=(5e-3,), seeds=(0, 1, 2),
                          train_episodes=7)
    cfg, hyper = cell_configs(spec, 5e-3)
    assert cfg == small_cfg
    assert hyper.learning_rate == 5e-3 and hyper.episodes == 7


def test_spec_rejects_unknown_names(small_cfg, tiny_hyper):
    with pytest.raises(ConfigError):
        ExperimentSpec(base=small_cfg, hyper=tiny_hyper, algorithms=("qmix", "oracle"))
    with pytest.raises(ConfigError):
        ExperimentSpec(base=small_cfg, hyper=tiny_hyper, axis="Z", values=(100,))


# ===========================
# Campaign runs
# ===========================

@pytest.fixture
def tiny_spec(small_cfg, tiny_hyper, tmp_path):
    return ExperimentSpec(
        base=small_cfg,
        hyper=tiny_hyper,
        algorithms=("cluster", "nearest", "qmix", "idqn"),
        seeds=(0,),
        eval_episodes=2,
        output_dir=str(tmp_path),
        run_name="campaign",
    )


def test_campaign_writes_every_artifact(tiny_spec, tmp_path):
    result = run_experiment(tiny_spec)
    assert result["success"]
    run = tmp_path / "campaign"
    metrics = read_csv(run / "metrics.csv")
    assert list(metrics.columns) == METRIC_COLUMNS
    assert sorted(metrics["algorithm"]) == ["cluster", "idqn", "nearest", "qmix"]
    assert (metrics["collision_count"] >= 0).all()
    assert read_csv_meta(run / "metrics.csv")["schema"] == "metrics/v1"
    assert (run / "timings.csv").exists() and not (run / "failures.csv").exists()
    assert (run / "spec.json").exists()
    for algorithm in ("qmix", "idqn"):
        cell = run / "cells" / f"{algorithm}__seed=0"
        assert (cell / "curve.csv").exists() and (cell / "checkpoint_final.pt").exists()
    for algorithm in ("cluster", "nearest", "qmix", "idqn"):
        trace = read_csv(run / "cells" / f"{algorithm}__seed=0" / "trace.csv")
        assert trace["t"].iloc[0] == 1
        assert (run / "cells" / f"{algorithm}__seed=0" / "episode.jsonl").exists()


def test_campaign_metrics_are_reproducible(small_cfg, tiny_hyper, tmp_path):
    for name in ("first", "second"):
        spec = ExperimentSpec(base=small_cfg, hyper=tiny_hyper, algorithms=("qmix", "cluster"), seeds=(3,),
                              eval_episodes=2, output_dir=str(tmp_path), run_name=name, write_traces=False)
        run_experiment(spec)
    assert (tmp_path / "first" / "metrics.csv").read_text() == (tmp_path / "second" / "metrics.csv").read_text()


def test_failing_cell_is_recorded_and_skipped(tiny_spec, tmp_path, monkeypatch):
    original = experiment_pipeline.evaluate

    def flaky(algorithm, *args, **kwargs):
        if algorithm == "cluster":
            raise RuntimeError("boom")
        return original(algorithm, *args, **kwargs)

    monkeypatch.setattr(experiment_pipeline, "evaluate", flaky)
    spec = replace(tiny_spec, algorithms=("cluster", "qmix"))
    result = run_experiment(spec)
    assert not result["success"]
    failures = read_csv(tmp_path / "campaign" / "failures.csv")
    assert failures["algorithm"].tolist() == ["cluster"]
    assert "boom" in failures["error"].iloc[0]
    assert [r.algorithm for r in result["rows"]] == ["qmix"]


# ===========================
# Summaries and checks
# ===========================

def test_summary_median_and_iqr(tmp_path):
    path = synthetic_metrics(tmp_path, {(1, "qmix"): 10.0, (1, "nearest"): 12.0})
    result = summarize(path)
    row = result["summary"].query("algorithm == 'qmix'").iloc[0]
    assert row["median"] == pytest.approx(10.0)
    assert row["q1"] == pytest.approx(9.95) and row["q3"] == pytest.approx(10.05)
    assert row["seeds"] == 3
    assert result["ordering"][1] == ["qmix", "nearest"]
    assert not result["warnings"]
    assert (tmp_path / "summary.csv").exists()


def test_summary_warns_on_few_seeds(tmp_path):
    path = synthetic_metrics(tmp_path, {(1, "qmix"): 10.0}, seeds=(0,))
    assert summarize(path, write=False)["warnings"]


def test_ordering_check(tmp_path):
    good = summarize(synthetic_metrics(tmp_path, {(1, "qmix"): 10.0, (1, "nearest"): 12.0, (1, "idqn"): 11.0}),
                     write=False)["summary"]
    assert check_ordering(good) == []
    bad = summarize(synthetic_metrics(tmp_path, {(1, "qmix"): 12.0, (1, "nearest"): 11.0}), write=False)["summary"]
    assert check_ordering(bad)
    close = summarize(synthetic_metrics(tmp_path, {(1, "qmix"): 10.0, (1, "nearest"): 10.2}), write=False)["summary"]
    assert any("margin" in p for p in check_ordering(close))


def test_ordering_skips_idqn_with_one_uav(tmp_path):
    single = {(1, "qmix"): 10.0, (1, "idqn"): 10.0, (1, "nearest"): 12.0}
    summary = summarize(synthetic_metrics(tmp_path, single, axis="M"), write=False)["summary"]
    assert check_ordering(summary, "M") == []
    assert check_ordering(summary)


def test_trend_checks(tmp_path):
    rising = {(-5, "qmix"): 10.0, (0, "qmix"): 12.0, (5, "qmix"): 15.0}
    summary = summarize(synthetic_metrics(tmp_path, rising, axis="XI_TH_DB"), write=False)["summary"]
    assert check_trend(summary, "XI_TH_DB") == []
    assert check_trend(summary, "LAMBDA_N")
    assert check_trend(summary, "M") == []


def test_single_uav_degeneracy_check(tmp_path):
    overlap = {(1, "qmix"): 10.0, (1, "idqn"): 10.05}
    summary = summarize(synthetic_metrics(tmp_path, overlap, axis="M"), write=False)["summary"]
    assert check_degeneracy(summary, "M") == []
    apart = {(1, "qmix"): 10.0, (1, "idqn"): 14.0}
    summary = summarize(synthetic_metrics(tmp_path, apart, axis="M"), write=False)["summary"]
    assert check_degeneracy(summary, "M")


def test_acceptance_result(tmp_path):
    path = synthetic_metrics(tmp_path, {(1, "qmix"): 10.0, (1, "nearest"): 12.0, (1, "idqn"): 11.0})
    assert check_acceptance(path)["success"]


# ===========================
# Storage
# ===========================

def test_csv_header_metadata(tmp_path):
    path = write_csv(pd.DataFrame({"a": [1.5, 2.0]}), tmp_path / "x.csv", "curve", {"seed": 4})
    assert read_csv_meta(path) == {"schema": "curve/v1", "seed": "4"}
    assert read_csv(path)["a"].tolist() == [1.5, 2.0]


def test_checkpoint_round_trip(small_cfg, tiny_hyper, tmp_path):
    storage = RunStorage(tmp_path, "ckpt")
    storage.enter_cell("qmix", None, None, 0)
    learner = QmixLearner(small_cfg, tiny_hyper, seed=0)
    learner.env_steps = 17
    path = storage.save_checkpoint(learner)

    restored = QmixLearner(small_cfg, tiny_hyper, seed=5)
    payload = load_checkpoint(path, restored)
    assert payload["config_hash"] == config_hash(small_cfg, tiny_hyper)
    assert payload["checkpoint_hash"] == checkpoint_hash(small_cfg, tiny_hyper)
    assert restored.env_steps == 17
    for a, b in zip(learner.agent.parameters(), restored.agent.parameters()):
        assert torch.equal(a, b)

    other = QmixLearner(small_cfg, replace(tiny_hyper, learning_rate=1e-2), seed=0)
    with pytest.raises(ValueError):
        load_checkpoint(path, other)


def test_checkpoint_loads_under_another_training_length(small_cfg, tiny_hyper, tmp_path):
    storage = RunStorage(tmp_path, "length")
    storage.enter_cell("qmix", None, None, 0)
    path = storage.save_checkpoint(QmixLearner(small_cfg, replace(tiny_hyper, episodes=3), seed=0))
    longer = replace(tiny_hyper, episodes=500, checkpoint_every=50, warmup_episodes=9)
    assert config_hash(small_cfg, longer) != config_hash(small_cfg, tiny_hyper)
    load_checkpoint(path, QmixLearner(small_cfg, longer, seed=0))


def test_final_checkpoint_carries_the_rng_cursor(small_cfg, tiny_hyper, tmp_path):
    storage = RunStorage(tmp_path, "rng")
    result = experiment_pipeline.train_pipeline(small_cfg, replace(tiny_hyper, checkpoint_every=0), "qmix", 0,
                                                storage=storage)
    assert result["success"]
    payload = torch.load(result["checkpoint"], map_location="cpu", weights_only=False)
    assert set(payload["rng"]) == {"policy", "replay"}
    assert payload["rng"]["policy"]["bit_generator"] == "Philox"

    restored = QmixLearner(small_cfg, tiny_hyper, seed=0)
    load_checkpoint(result["checkpoint"], restored)
    restored_counter = restored.rng_state["policy"]["state"]["counter"]
    assert np.array_equal(restored_counter, payload["rng"]["policy"]["state"]["counter"])


def test_cell_path_needs_a_cell(tmp_path):
    with pytest.raises(RuntimeError):
        RunStorage(tmp_path, "empty").cell_path("x.csv")


# ===========================
# Command line
# ===========================

def test_cli_summarize(tmp_path):
    path = synthetic_metrics(tmp_path, {(1, "qmix"): 10.0, (1, "nearest"): 12.0})
    assert app.main(["summarize", str(path)]) == app.EXIT_OK


def test_cli_acceptance_failure(tmp_path):
    path = synthetic_metrics(tmp_path, {(1, "qmix"): 12.0, (1, "nearest"): 11.0})
    assert app.main(["summarize", str(path), "--check"]) == app.EXIT_CHECK


def test_cli_config_error(tmp_path):
    assert app.main(["train", "--config", str(tmp_path / "missing.env")]) == app.EXIT_CONFIG


def test_cli_eval_cluster(tmp_path):
    config = tmp_path / "tiny.env"
    config.write_text("N=3\nM=2\nT=25\nAREA_SIDE=200\n")
    assert app.main(["eval", "--config", str(config), "--algorithm", "cluster", "--eval-episodes", "1"]) == app.EXIT_OK


def test_cli_eval_after_training_with_episodes(tmp_path):
    config = tmp_path / "tiny.env"
    config.write_text("N=3\nM=2\nT=25\nAREA_SIDE=200\nEP=2\nHIDDEN=8\nMIXER_HIDDEN=8\nHYPER_HIDDEN=8\n"
                      "BATCH_SIZE=2\nWARMUP=1\nCHECKPOINT_EVERY=0\n")
    assert app.main(["train", "--config", str(config), "--episodes", "3", "--output", str(tmp_path),
                     "--run-name", "short"]) == app.EXIT_OK
    checkpoint = tmp_path / "short" / "cells" / "qmix__seed=0" / "checkpoint_final.pt"
    assert app.main(["eval", "--config", str(config), "--algorithm", "qmix", "--checkpoint", str(checkpoint),
                     "--eval-episodes", "1"]) == app.EXIT_OK


def test_cli_train_then_trace(tmp_path):
    config = tmp_path / "tiny.env"
    config.write_text("N=3\nM=2\nT=25\nAREA_SIDE=200\nEP=2\nHIDDEN=8\nMIXER_HIDDEN=8\nHYPER_HIDDEN=8\n"
                      "BATCH_SIZE=2\nWARMUP=1\nCHECKPOINT_EVERY=0\n")
    assert app.main(["train", "--config", str(config), "--output", str(tmp_path), "--run-name", "cli"]) == app.EXIT_OK
    checkpoint = tmp_path / "cli" / "cells" / "qmix__seed=0" / "checkpoint_final.pt"
    assert checkpoint.exists()
    out = tmp_path / "trace.csv"
    assert app.main(["trace", "--config", str(config), "--algorithm", "nearest", "--checkpoint", str(checkpoint),
                     "--out", str(out)]) == app.EXIT_OK
    frame = read_csv(out)
    assert np.all(frame["t"].to_numpy() == np.arange(1, len(frame) + 1))
