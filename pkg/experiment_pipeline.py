"""
Experiment campaigns: train, evaluate, sweep, summarize
Each (algorithm, sweep value, seed) cell writes its own files; a failing cell
is reported and skipped so the rest of the campaign still runs.
"""
import json
import time
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from baselines import ClusterPolicy, IdqnLearner, NearestPolicy
from config import VERBOSE, ConfigError, config_hash, with_overrides
from decpomdp import UavAoiEnv, objective, residual_energy, run_episode, trace_frame, write_record_jsonl
from qmix import QmixLearner, execute, train
from storage_utils import RunStorage, load_checkpoint, read_csv, read_csv_meta, write_csv

ALGORITHMS = ("qmix", "qmix_nomask", "idqn", "nearest", "cluster")
LEARNED = ("qmix", "qmix_nomask", "idqn")

# axis name -> (which config, field, cast)
SWEEP_AXES = {
    "M": ("world", "num_uavs", int),
    "N": ("world", "num_sns", int),
    "XI_TH_DB": ("world", "xi_th_db", float),
    "LAMBDA_N": ("world", "lambda_n", float),
    "E_MAX": ("world", "e_max", float),
    "ALPHA": ("hyper", "learning_rate", float),
}

# Evaluation episodes use env streams disjoint from training episodes
EVAL_EPISODE_OFFSET = 1_000_000
MIN_REPORTED_SEEDS = 3
ORDERING_MARGIN = 0.05
LEARNING_DROP = 0.30
LEARNING_WINDOW = 500


def _say(message):
    if VERBOSE:
        print(message)


@dataclass
class ExperimentSpec:
    base: object                      # WorldConfig
    hyper: object                     # QmixHyper
    axis: str = None
    values: tuple = (None,)
    algorithms: tuple = ("qmix", "nearest", "cluster")
    seeds: tuple = (0, 1, 2)
    train_episodes: int = None        # None -> hyper.episodes
    eval_episodes: int = 50
    output_dir: str = None
    run_name: str = None
    cluster_any_coverage: bool = False
    write_traces: bool = True

    def __post_init__(self):
        unknown = [a for a in self.algorithms if a not in ALGORITHMS]
        if unknown:
            raise ConfigError(f"Unknown algorithms: {unknown}")
        if self.axis is not None and self.axis not in SWEEP_AXES:
            raise ConfigError(f"Unknown sweep axis {self.axis}; choose from {sorted(SWEEP_AXES)}")
        if self.axis is None:
            self.values = (None,)
        else:
            cast = SWEEP_AXES[self.axis][2]
            try:
                self.values = tuple(cast(v) for v in self.values)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"Bad {self.axis} sweep value: {e}")
        self.seeds = tuple(int(s) for s in self.seeds)
        if len(self.seeds) < MIN_REPORTED_SEEDS:
            _say(f"⚠️ Only {len(self.seeds)} seed(s); comparisons need at least {MIN_REPORTED_SEEDS}")
        for value in self.values:
            cell_configs(self, value)

    def to_json(self):
        payload = asdict(self)
        payload["base"] = asdict(self.base)
        payload["hyper"] = asdict(self.hyper)
        return json.dumps(payload, indent=2, default=str)


@dataclass
class MetricsRow:
    algorithm: str
    axis: str
    value: object
    seed: int
    total_average_aoi: float
    collision_count: int
    mean_residual_energy: float
    config_hash: str
    wall_time: float = field(default=0.0, compare=False)

    def as_metrics(self):
        row = asdict(self)
        row.pop("wall_time")
        return row


def cell_configs(spec, value):
    """(WorldConfig, QmixHyper) of one sweep value"""
    cfg, hyper = spec.base, spec.hyper
    if spec.train_episodes is not None:
        hyper = replace(hyper, episodes=int(spec.train_episodes))
    if spec.axis is None:
        return cfg, hyper
    target, name, cast = SWEEP_AXES[spec.axis]
    value = cast(value)
    if target == "hyper":
        return cfg, replace(hyper, **{name: value})
    changes = {name: value}
    if spec.axis == "E_MAX" and cfg.layout != "loop":
        changes["layout"] = "loop"
    return with_overrides(cfg, **changes), hyper



# ===========================
# Policies per algorithm
# ===========================

def build_learner(algorithm, cfg, hyper, seed):
    if algorithm == "qmix":
        return QmixLearner(cfg, replace(hyper, use_action_mask=True), seed)
    if algorithm == "qmix_nomask":
        learner = QmixLearner(cfg, replace(hyper, use_action_mask=False), seed)
        learner.algorithm = "qmix_nomask"
        return learner
    if algorithm == "idqn":
        return IdqnLearner(cfg, replace(hyper, use_action_mask=True), seed)
    raise ConfigError(f"{algorithm} is not a learned algorithm")


def evaluate(algorithm, cfg, seed, episodes, learner=None, any_coverage=False, keep_first=False):
    """
    Greedy evaluation episodes on env streams disjoint from training.
    Learned algorithms and nearest need a trained learner (QMIX for nearest).
    """
    if algorithm in LEARNED or algorithm == "nearest":
        if learner is None:
            raise ConfigError(f"{algorithm} needs a trained learner")
    env = UavAoiEnv(cfg, seed, strict=learner.hyper.use_action_mask if algorithm in LEARNED else True)
    policy = None
    if algorithm == "nearest":
        policy = NearestPolicy(cfg, learner)
    elif algorithm == "cluster":
        policy = ClusterPolicy(cfg, any_coverage=any_coverage)

    records = []
    for k in range(episodes):
        env.keep_world_states = keep_first and k == 0
        if policy is None:
            records.append(execute(learner, env, EVAL_EPISODE_OFFSET + k))
        else:
            policy.reset()
            records.append(run_episode(env, policy, EVAL_EPISODE_OFFSET + k))
    return records


def metrics_row(algorithm, axis, value, seed, cfg, hyper, records, wall_time=0.0):
    return MetricsRow(
        algorithm=algorithm,
        axis=axis or "",
        value="" if value is None else value,
        seed=seed,
        total_average_aoi=objective(records, cfg),
        collision_count=int(sum(r.collided for r in records)),
        mean_residual_energy=float(np.mean([residual_energy(r, cfg) for r in records])),
        config_hash=config_hash(cfg, hyper),
        wall_time=wall_time,
    )


def _cell_meta(algorithm, axis, value, seed, cfg, hyper):
    return {"config_hash": config_hash(cfg, hyper), "seed": seed, "algorithm": algorithm,
            "axis": axis or "", "value": "" if value is None else value}


# ===========================
# Cells
# ===========================

def run_cell(spec, algorithm, value, seed, storage, learners=None):
    """
    Train (if learned) and evaluate one algorithm at one sweep value and seed.
    learners caches trained models of this (value, seed) so the nearest-scheduling
    policy can reuse the QMIX movement network.
    """
    learners = {} if learners is None else learners
    cfg, hyper = cell_configs(spec, value)
    meta = _cell_meta(algorithm, spec.axis, value, seed, cfg, hyper)
    folder = storage.enter_cell(algorithm, spec.axis, value, seed)
    started = time.time()

    learner = None
    if algorithm in LEARNED:
        learner, curve = train(cfg, hyper, seed, learner=build_learner(algorithm, cfg, hyper, seed),
                               storage=storage, label=algorithm)
        learners[algorithm] = learner
        write_csv(curve, folder / "curve.csv", "curve", meta)
        storage.save_checkpoint(learner, tag="final")
    elif algorithm == "nearest":
        if "qmix" not in learners:
            # movement network for the nearest-scheduling baseline
            learners["qmix"], _ = train(cfg, hyper, seed, learner=build_learner("qmix", cfg, hyper, seed),
                                        label="qmix (movement for nearest)")
        learner = learners["qmix"]

    records = evaluate(algorithm, cfg, seed, spec.eval_episodes, learner=learner,
                       any_coverage=spec.cluster_any_coverage, keep_first=spec.write_traces)
    if spec.write_traces:
        write_csv(trace_frame(records[0], cfg), folder / "trace.csv", "trace", meta)
        write_record_jsonl(records[0], folder / "episode.jsonl", meta)
    row = metrics_row(algorithm, spec.axis, value, seed, cfg, hyper, records, time.time() - started)
    _say(f"✅ {algorithm:12s} value={meta['value']!s:8s} seed={seed}: "
         f"AoI={row.total_average_aoi:.3f} collisions={row.collision_count}")
    return row


# ===========================
# Single-run pipelines (CLI verbs)
# ===========================

def train_pipeline(cfg, hyper, algorithm, seed, storage=None):
    """Train one learner, write its curve and final checkpoint"""
    if algorithm not in LEARNED:
        raise ConfigError(f"{algorithm} is not trainable; choose from {list(LEARNED)}")
    try:
        storage = storage or RunStorage()
        folder = storage.enter_cell(algorithm, None, None, seed)
        meta = _cell_meta(algorithm, None, None, seed, cfg, hyper)
        learner, curve = train(cfg, hyper, seed, learner=build_learner(algorithm, cfg, hyper, seed),
                               storage=storage, label=algorithm)
        curve_path = write_csv(curve, folder / "curve.csv", "curve", meta)
        checkpoint = storage.save_checkpoint(learner, tag="final")
        return {"success": True, "learner": learner, "curve_path": curve_path, "checkpoint": checkpoint}
    except Exception as e:
        print(f"❌ Training {algorithm} failed: {e}")
        traceback.print_exc()
        return {"success": False, "error": f"{type(e).__name__}: {e}"}


def restore_learner(algorithm, cfg, hyper, seed, checkpoint):
    """Learner rebuilt from a checkpoint (nearest loads the QMIX checkpoint it steers with)"""
    learner = build_learner("qmix" if algorithm == "nearest" else algorithm, cfg, hyper, seed)
    load_checkpoint(checkpoint, learner)
    return learner


def evaluate_pipeline(cfg, hyper, algorithm, seed, episodes, checkpoint=None, any_coverage=False):
    """Greedy evaluation of one algorithm; returns {"success", "row", "records"}"""
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"Unknown algorithm {algorithm}")
    if algorithm != "cluster" and checkpoint is None:
        raise ConfigError(f"{algorithm} evaluation needs --checkpoint")
    try:
        learner = None if algorithm == "cluster" else restore_learner(algorithm, cfg, hyper, seed, checkpoint)
        started = time.time()
        records = evaluate(algorithm, cfg, seed, episodes, learner=learner, any_coverage=any_coverage)
        row = metrics_row(algorithm, None, None, seed, cfg, hyper, records, time.time() - started)
        print(f"✅ {algorithm} over {episodes} episode(s): total average AoI {row.total_average_aoi:.4f}, "
              f"collisions {row.collision_count}, residual energy {row.mean_residual_energy:.1f} J")
        return {"success": True, "row": row, "records": records}
    except Exception as e:
        print(f"❌ Evaluating {algorithm} failed: {e}")
        traceback.print_exc()
        return {"success": False, "error": f"{type(e).__name__}: {e}"}


def trace_pipeline(cfg, hyper, algorithm, seed, output_path, checkpoint=None, any_coverage=False):
    """One greedy episode exported as a per-slot trace CSV"""
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"Unknown algorithm {algorithm}")
    if algorithm != "cluster" and checkpoint is None:
        raise ConfigError(f"{algorithm} trace needs --checkpoint")
    try:
        learner = None if algorithm == "cluster" else restore_learner(algorithm, cfg, hyper, seed, checkpoint)
        record = evaluate(algorithm, cfg, seed, 1, learner=learner, any_coverage=any_coverage,
                          keep_first=True)[0]
        path = write_csv(trace_frame(record, cfg), output_path, "trace",
                         _cell_meta(algorithm, None, None, seed, cfg, hyper))
        print(f"💾 Trace saved: {path}")
        return {"success": True, "trace_path": path, "record": record}
    except Exception as e:
        print(f"❌ Tracing {algorithm} failed: {e}")
        traceback.print_exc()
        return {"success": False, "error": f"{type(e).__name__}: {e}"}


# ===========================
# Campaigns
# ===========================

def run_experiment(spec, storage=None):
    """
    Run every (value, seed, algorithm) cell sequentially.
    Returns {"success", "run_folder", "metrics_path", "rows", "failures"}.
    """
    storage = storage or RunStorage(spec.output_dir, spec.run_name)
    storage.run_path("spec.json").write_text(spec.to_json())

    _say(f"\n{'=' * 70}")
    _say(f"🚀 CAMPAIGN: axis={spec.axis or '-'} values={list(spec.values)} "
         f"algorithms={list(spec.algorithms)} seeds={list(spec.seeds)}")
    _say(f"{'=' * 70}")

    # learned algorithms first so nearest can reuse the trained QMIX
    order = sorted(spec.algorithms, key=lambda a: (a not in LEARNED, ALGORITHMS.index(a)))
    rows, failures = [], []
    for value in spec.values:
        for seed in spec.seeds:
            learners = {}
            for algorithm in order:
                try:
                    rows.append(run_cell(spec, algorithm, value, seed, storage, learners))
                except Exception as e:
                    print(f"❌ Cell {algorithm} value={value} seed={seed} failed: {e}")
                    traceback.print_exc()
                    failures.append({"algorithm": algorithm, "axis": spec.axis or "",
                                     "value": "" if value is None else value, "seed": seed,
                                     "error": f"{type(e).__name__}: {e}"})

    meta = {"config_hash": config_hash(spec.base, spec.hyper), "seeds": ",".join(map(str, spec.seeds))}
    metrics = pd.DataFrame([r.as_metrics() for r in rows],
                           columns=[f for f in MetricsRow.__dataclass_fields__ if f != "wall_time"])
    metrics_path = write_csv(metrics, storage.run_path("metrics.csv"), "metrics", meta)
    timings = pd.DataFrame([{"algorithm": r.algorithm, "value": r.value, "seed": r.seed,
                             "wall_time": r.wall_time} for r in rows])
    write_csv(timings, storage.run_path("timings.csv"), "timings", meta)
    if failures:
        write_csv(pd.DataFrame(failures), storage.run_path("failures.csv"), "failures", meta)
        print(f"⚠️ {len(failures)} cell(s) failed; see {storage.run_path('failures.csv')}")

    _say(f"💾 Metrics: {metrics_path}")
    return {
        "success": not failures,
        "run_folder": str(storage.run_folder),
        "metrics_path": metrics_path,
        "rows": rows,
        "failures": failures,
    }


# ===========================
# Summaries and checks
# ===========================

def summarize(metrics_path, write=True):
    """
    Median and IQR of total average AoI per (algorithm, value), and the
    algorithm ordering (lowest AoI first) per value.
    """
    frame = read_csv(metrics_path)
    frame["value"] = frame["value"].fillna("")
    grouped = frame.groupby(["value", "algorithm"])["total_average_aoi"]
    summary = pd.DataFrame({
        "median": grouped.median(),
        "q1": grouped.quantile(0.25),
        "q3": grouped.quantile(0.75),
        "seeds": grouped.count(),
    }).reset_index()

    warnings = []
    for _, row in summary[summary["seeds"] < MIN_REPORTED_SEEDS].iterrows():
        warnings.append(f"{row['algorithm']} at value={row['value']!s}: only {row['seeds']} seed(s)")
    for message in warnings:
        print(f"⚠️ {message}")

    ordering = {}
    for value, part in summary.groupby("value", sort=True):
        ranked = part.sort_values(["median", "algorithm"])
        ordering[value] = list(ranked["algorithm"])

    if write:
        meta = read_csv_meta(metrics_path)
        meta.pop("schema", None)
        write_csv(summary, Path(metrics_path).with_name("summary.csv"), "summary", meta)
    return {"summary": summary, "ordering": ordering, "warnings": warnings}


def _median(summary, algorithm, value):
    part = summary[(summary["algorithm"] == algorithm) & (summary["value"] == value)]
    return None if part.empty else float(part["median"].iloc[0])


def check_ordering(summary, axis=""):
    """QMIX below nearest and IDQN, by at least the margin on one of them"""
    problems = []
    for value in sorted(set(summary["value"]), key=str):
        qmix = _median(summary, "qmix", value)
        rivals = ("nearest",) if axis == "M" and float(value) == 1 else ("nearest", "idqn")
        others = {a: _median(summary, a, value) for a in rivals}
        others = {a: m for a, m in others.items() if m is not None}
        if qmix is None or not others:
            continue
        for name, median in others.items():
            if not qmix < median:
                problems.append(f"value={value!s}: qmix {qmix:.3f} not below {name} {median:.3f}")
        if not any(median > 0 and (median - qmix) / median >= ORDERING_MARGIN for median in others.values()):
            problems.append(f"value={value!s}: qmix margin below {ORDERING_MARGIN:.0%} on every baseline")
    return problems


def check_trend(summary, axis, algorithm="qmix"):
    """AoI non-decreasing in the SINR threshold, non-increasing in the arrival probability"""
    direction = {"XI_TH_DB": 1, "LAMBDA_N": -1}.get(axis)
    if direction is None:
        return []
    part = summary[summary["algorithm"] == algorithm].copy()
    part["x"] = part["value"].astype(float)
    medians = part.sort_values("x")["median"].to_numpy()
    steps = np.diff(medians) * direction
    if np.any(steps < 0):
        return [f"{algorithm} median AoI not monotone along {axis}: {medians.round(3).tolist()}"]
    return []


def check_degeneracy(summary, axis):
    """With one UAV, QMIX and IDQN interquartile ranges overlap"""
    if axis != "M":
        return []
    problems = []
    for value in summary["value"]:
        if float(value) != 1:
            continue
        rows = summary[summary["value"] == value].set_index("algorithm")
        if {"qmix", "idqn"} <= set(rows.index):
            a, b = rows.loc["qmix"], rows.loc["idqn"]
            if a["q3"] < b["q1"] or b["q3"] < a["q1"]:
                problems.append(f"M=1: qmix IQR [{a['q1']:.3f}, {a['q3']:.3f}] and idqn "
                                f"[{b['q1']:.3f}, {b['q3']:.3f}] do not overlap")
    return problems


def check_learning(run_folder, window=LEARNING_WINDOW):
    """
    Training curves: median over seeds of the cumulative-cost drop from the first to
    the last window must reach LEARNING_DROP; masked QMIX must end no worse than unmasked.
    """
    problems = []
    finals = {}
    for algorithm in ("qmix", "qmix_nomask"):
        drops, ends = [], []
        for path in sorted(Path(run_folder).glob(f"cells/{algorithm}__*/curve.csv")):
            curve = read_csv(path)["cumulative_cost"].to_numpy()
            w = min(window, max(len(curve) // 6, 1))
            first, last = curve[:w].mean(), curve[-w:].mean()
            drops.append((first - last) / first if first > 0 else 0.0)
            ends.append(last)
        if not drops:
            continue
        finals[algorithm] = float(np.median(ends))
        if algorithm == "qmix" and np.median(drops) < LEARNING_DROP:
            problems.append(f"qmix cumulative cost fell by {np.median(drops):.1%}, below {LEARNING_DROP:.0%}")
    if "qmix" in finals and "qmix_nomask" in finals and finals["qmix"] > finals["qmix_nomask"]:
        problems.append(f"masked qmix final cost {finals['qmix']:.1f} above unmasked {finals['qmix_nomask']:.1f}")
    return problems


def check_acceptance(metrics_path):
    """Run every applicable check on a finished campaign; returns {"success", "problems"}"""
    result = summarize(metrics_path)
    summary = result["summary"]
    frame = read_csv(metrics_path)
    axis = str(frame["axis"].dropna().iloc[0]) if "axis" in frame and frame["axis"].notna().any() else ""

    problems = []
    problems += check_ordering(summary, axis)
    problems += check_trend(summary, axis)
    problems += check_degeneracy(summary, axis)
    problems += check_learning(Path(metrics_path).parent)

    print(f"\n{'=' * 70}")
    print("📋 ACCEPTANCE CHECKS")
    print(f"{'=' * 70}")
    for value, ranked in result["ordering"].items():
        print(f"   value={value!s:8s} ordering: {' < '.join(ranked)}")
    if problems:
        for message in problems:
            print(f"❌ {message}")
    else:
        print("✅ All applicable checks passed")
    return {"success": not problems, "problems": problems, "ordering": result["ordering"]}
