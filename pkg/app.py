# app.py (command-line entry point)
import argparse
import sys
from dataclasses import replace

from dotenv import load_dotenv

from config import ConfigError, describe, load_qmix_hyper, load_world_config, profile_qmix_hyper, profile_world_config
from experiment_pipeline import (
    ALGORITHMS,
    LEARNED,
    SWEEP_AXES,
    ExperimentSpec,
    check_acceptance,
    evaluate_pipeline,
    run_experiment,
    summarize,
    trace_pipeline,
    train_pipeline,
)
from storage_utils import RunStorage

load_dotenv()

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_CHECK = 3


def _csv_list(text, cast=str):
    return [cast(item) for item in text.split(",") if item.strip()]


def load_configs(args):
    """World and learner configuration from --profile or --config, plus CLI overrides"""
    if args.config:
        cfg = load_world_config(args.config)
        hyper = load_qmix_hyper(args.config)
    else:
        cfg = profile_world_config(args.profile)
        hyper = profile_qmix_hyper(args.profile)
    if getattr(args, "episodes", None):
        hyper = replace(hyper, episodes=args.episodes)
    return cfg, hyper


def build_parser():
    parser = argparse.ArgumentParser(description="Multi-UAV AoI data collection: QMIX and baselines")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--profile", default="desk", choices=["full", "desk"])
    common.add_argument("--config", help="dotenv-format config file (overrides --profile)")
    common.add_argument("--output", help="output root (default: UAV_AOI_OUTPUT_ROOT)")
    common.add_argument("--run-name", help="fixed run folder name")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train one learner")
    p.add_argument("--algorithm", default="qmix", choices=list(LEARNED))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--episodes", type=int)

    p = sub.add_parser("eval", parents=[common], help="greedy evaluation of a trained policy")
    p.add_argument("--algorithm", default="qmix", choices=list(ALGORITHMS))
    p.add_argument("--checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-episodes", type=int, default=50)
    p.add_argument("--any-coverage", action="store_true")

    p = sub.add_parser("sweep", parents=[common], help="campaign over a sweep axis and seeds")
    p.add_argument("--axis", choices=sorted(SWEEP_AXES))
    p.add_argument("--values", default="")
    p.add_argument("--algorithms", default="qmix,nearest,cluster")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--episodes", type=int)
    p.add_argument("--eval-episodes", type=int, default=50)
    p.add_argument("--any-coverage", action="store_true")
    p.add_argument("--no-traces", action="store_true")
    p.add_argument("--check", action="store_true", help="run acceptance checks after the sweep")

    p = sub.add_parser("trace", parents=[common], help="export one greedy episode per slot")
    p.add_argument("--algorithm", default="cluster", choices=list(ALGORITHMS))
    p.add_argument("--checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--any-coverage", action="store_true")
    p.add_argument("--out", default="trace.csv")

    p = sub.add_parser("summarize", help="median/IQR summary of a metrics CSV")
    p.add_argument("metrics")
    p.add_argument("--check", action="store_true", help="run acceptance checks")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "summarize":
            if args.check:
                return EXIT_OK if check_acceptance(args.metrics)["success"] else EXIT_CHECK
            result = summarize(args.metrics)
            print(result["summary"].to_string(index=False))
            return EXIT_OK

        cfg, hyper = load_configs(args)
        print(f"\n{'=' * 70}")
        print(f"🛰️ {args.command.upper()} | {describe(cfg)}")
        print(f"{'=' * 70}")

        if args.command == "train":
            result = train_pipeline(cfg, hyper, args.algorithm, args.seed,
                                    storage=RunStorage(args.output, args.run_name))
            if result["success"]:
                print(f"💾 Checkpoint: {result['checkpoint']}")
        elif args.command == "eval":
            result = evaluate_pipeline(cfg, hyper, args.algorithm, args.seed, args.eval_episodes,
                                       checkpoint=args.checkpoint, any_coverage=args.any_coverage)
        elif args.command == "trace":
            result = trace_pipeline(cfg, hyper, args.algorithm, args.seed, args.out,
                                    checkpoint=args.checkpoint, any_coverage=args.any_coverage)
        else:
            spec = ExperimentSpec(
                base=cfg,
                hyper=hyper,
                axis=args.axis,
                values=tuple(_csv_list(args.values)) or (None,),
                algorithms=tuple(_csv_list(args.algorithms)),
                seeds=tuple(_csv_list(args.seeds, int)),
                eval_episodes=args.eval_episodes,
                output_dir=args.output,
                run_name=args.run_name,
                cluster_any_coverage=args.any_coverage,
                write_traces=not args.no_traces,
            )
            result = run_experiment(spec)
            if args.check and result["rows"]:
                if not check_acceptance(result["metrics_path"])["success"]:
                    return EXIT_CHECK
    except ConfigError as e:
        print(f"❌ Configuration error: {e}")
        return EXIT_CONFIG
    except Exception as e:
        print(f"❌ {args.command} failed: {e}")
        return EXIT_RUNTIME
    return EXIT_OK if result["success"] else EXIT_RUNTIME


if __name__ == '__main__':
    sys.exit(main())
