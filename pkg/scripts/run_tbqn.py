#!/usr/bin/env python3
"""
TBQN Lab Runner

Train, evaluate and study Transformer-Based Q-Networks on classic-control
environments. Run this from your project root directory.

Usage:
    python scripts/run_tbqn.py <command> [options]

Examples:
    python scripts/run_tbqn.py train --preset final-table3 --env cartpole --steps 50000 --seed 1
    python scripts/run_tbqn.py train --config runs/demo/resolved_config.yaml --set agent.lr=1e-4
    python scripts/run_tbqn.py eval --checkpoint runs/demo/checkpoint_best --episodes 10
    python scripts/run_tbqn.py search --space search_spaces/control_space.yaml --trials 30 --workers 4
    python scripts/run_tbqn.py variants --env cartpole --steps 50000 --seeds 0,1,2
    python scripts/run_tbqn.py compare --run final --run baseline --run final+agent.grad_clip=null
    python scripts/run_tbqn.py validate --out runs/demo

Settings can also come from TBQN_* environment variables, e.g.
TBQN_AGENT__LR=1e-4 sets agent.lr.
"""

import argparse
import sys
from pathlib import Path

# Add scripts directory to path
script_dir = Path(__file__).parent
sys.path.append(str(script_dir))

from search_experiment import cmd_search
from tbqn_errors import EXIT_OK, exit_code_for
from train_experiment import cmd_eval, cmd_train
from validate_outputs import cmd_validate, has_critical_issues
from variants_experiment import DEFAULT_COMPARISON, cmd_compare, cmd_variants

DEFAULT_SPACE = script_dir.parent / "search_spaces" / "control_space.yaml"


def _int_list(text: str):
    return [int(part) for part in text.split(",") if part.strip()]


def _name_list(text: str):
    return [part.strip() for part in text.split(",") if part.strip()]


def add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=str, default=None, help="YAML run config (e.g. a resolved_config.yaml)")
    parser.add_argument("--preset", type=str, default=None, help="Preset name (baseline-fig4, final-table3, ...)")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Dotted override, repeatable (e.g. --set agent.lr=1e-4)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Transformer-Based Q-Network lab")
    parser.add_argument("--quiet", action="store_true", help="Disable progress bars")
    subparsers = parser.add_subparsers(dest="command", required=True)

    train = subparsers.add_parser("train", help="Train one TBQN")
    add_config_flags(train)
    train.add_argument("--env", type=str, default=None)
    train.add_argument("--steps", type=int, default=None, help="Total environment steps")
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--out", type=str, default=None, help="Run output directory")

    evaluate = subparsers.add_parser("eval", help="Greedy evaluation of a checkpoint")
    evaluate.add_argument("--checkpoint", type=str, required=True, help="Checkpoint path (.json/.bin or stem)")
    evaluate.add_argument("--env", type=str, default=None, help="Defaults to the checkpoint's env")
    evaluate.add_argument("--episodes", type=int, default=10)
    evaluate.add_argument("--seed", type=int, default=None, help="Defaults to the checkpoint's seed")
    evaluate.add_argument("--dump-trajectory", type=str, default=None, help="Write episode 0 as CSV")

    search = subparsers.add_parser("search", help="Hyperparameter study")
    add_config_flags(search)
    search.add_argument("--space", type=str, default=str(DEFAULT_SPACE), help="Search-space YAML")
    search.add_argument("--sampler", choices=["random", "tpe"], default="tpe")
    search.add_argument("--trials", type=int, default=30)
    search.add_argument("--envs", type=_name_list, default=["cartpole"], help="Comma-separated environments")
    search.add_argument("--steps", type=int, default=15000, help="Environment steps per run")
    search.add_argument("--runs-per-sample", type=int, default=2)
    search.add_argument("--seed", type=int, default=0)
    search.add_argument("--workers", type=int, default=1)
    search.add_argument("--out", type=str, default="runs/search")

    variants = subparsers.add_parser("variants", help="Train the five model-size variants")
    add_config_flags(variants)
    variants.add_argument("--env", type=str, default="cartpole")
    variants.add_argument("--steps", type=int, default=50000)
    variants.add_argument("--seeds", type=_int_list, default=[0], help="Comma-separated seeds")
    variants.add_argument("--workers", type=int, default=1)
    variants.add_argument("--out", type=str, default="runs/variants")

    compare = subparsers.add_parser("compare", help="Compare presets/ablations across seeds")
    compare.add_argument(
        "--run",
        dest="runs",
        action="append",
        default=None,
        metavar="PRESET[+KEY=VALUE...]",
        help=f"Run spec, repeatable (default: {', '.join(DEFAULT_COMPARISON)})",
    )
    compare.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    compare.add_argument("--env", type=str, default="cartpole")
    compare.add_argument("--steps", type=int, default=50000)
    compare.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    compare.add_argument("--workers", type=int, default=1)
    compare.add_argument("--out", type=str, default="runs/compare")

    validate = subparsers.add_parser("validate", help="Check an output directory")
    validate.add_argument("--out", type=str, required=True, help="Directory to validate")

    return parser


def run_command(args) -> int:
    progress = not args.quiet

    if args.command == "train":
        return cmd_train(
            config_path=args.config,
            overrides=args.overrides,
            seed=args.seed,
            preset=args.preset,
            env=args.env,
            steps=args.steps,
            out=args.out,
            progress=progress,
        )

    if args.command == "eval":
        summary = cmd_eval(args.checkpoint, args.env, args.episodes, args.seed, args.dump_trajectory)
        print_eval_summary(summary)
        return EXIT_OK

    if args.command == "search":
        return cmd_search(
            args.space,
            sampler=args.sampler,
            trials=args.trials,
            envs=args.envs,
            steps=args.steps,
            out=args.out,
            seed=args.seed,
            workers=args.workers,
            runs_per_sample=args.runs_per_sample,
            preset=args.preset or "final",
            config_path=args.config,
            overrides=args.overrides,
            progress=progress,
        )

    if args.command == "variants":
        return cmd_variants(
            env=args.env,
            steps=args.steps,
            seeds=args.seeds,
            out=args.out,
            workers=args.workers,
            preset=args.preset or "final",
            overrides=args.overrides,
            progress=progress,
        )

    if args.command == "compare":
        return cmd_compare(
            run_specs=args.runs or DEFAULT_COMPARISON,
            env=args.env,
            steps=args.steps,
            seeds=args.seeds,
            out=args.out,
            workers=args.workers,
            overrides=args.overrides,
            progress=progress,
        )

    results = cmd_validate(args.out)
    print_validation_results(results)
    return 1 if has_critical_issues(results) else EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    print("🤖 TBQN Lab")
    print("=" * 50)
    print(f"Command: {args.command}")
    print()

    try:
        code = run_command(args)
    except Exception as e:
        code = exit_code_for(e)
        print(f"\n❌ {args.command} failed: {e}")
        if code == 1:
            raise
        return code

    if code == EXIT_OK:
        print(f"\n✅ {args.command} complete!")
        out = getattr(args, "out", None)
        if out:
            print(f"\nGenerated files in '{out}' (see summary_report.txt)")
    else:
        print(f"\n⚠️  {args.command} finished with exit code {code}")
    return code


def print_eval_summary(summary):
    """Print formatted evaluation results."""
    print("\n📈 Evaluation Results")
    print("-" * 30)
    print(f"Episodes: {summary['episodes']}")
    print(f"Mean return: {summary['mean']:.2f} (±{summary['std']:.2f})")
    print(f"Min / max: {summary['min']:.2f} / {summary['max']:.2f}")


def print_validation_results(results):
    print("\n🔍 Validation Results")
    print("-" * 30)
    for name, result in results.items():
        status = result.get("status", "UNKNOWN")
        icon = {"GOOD": "✅", "WARNINGS": "⚠️ "}.get(status, "🚨")
        print(f"{icon} {name}: {status}")
        for issue in result.get("issues", []):
            print(f"    • {issue}")


if __name__ == "__main__":
    sys.exit(main())
