# scripts/variants_experiment.py
"""
Multi-run orchestration: the five model-size variants of the final recipe
(cmd_variants) and preset/ablation comparisons across seeds (cmd_compare).
Every run is an isolated TrainExperiment in its own directory; a failing
run is logged and the rest continue.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Sequence, Tuple

import numpy as np
import pandas as pd

from experiment_base import ExperimentBase
from run_config import RunConfig, apply_dotted, parse_override, resolve_config
from tbqn_errors import EXIT_DIVERGED, EXIT_OK
from train_experiment import TrainExperiment

# (history_horizon, model_dim, ff_dim, num_layers)
MODEL_VARIANTS: Dict[str, Tuple[int, int, int, int]] = {
    "H5-d64-L3": (5, 64, 256, 3),
    "H5-d64-L6": (5, 64, 256, 6),
    "H3-d64-L3": (3, 64, 256, 3),
    "H7-d64-L3": (7, 64, 256, 3),
    "H5-d128-L3": (5, 128, 512, 3),
}

DEFAULT_COMPARISON = ("final", "baseline", "final+agent.grad_clip=null")


@dataclass
class RunTask:
    label: str
    seed: int
    config: Dict[str, Any]


def train_task(task: RunTask) -> Dict[str, Any]:
    """Run one TrainExperiment; never raises."""
    result: Dict[str, Any] = {"label": task.label, "seed": task.seed, "status": "ok", "error": ""}
    try:
        experiment = TrainExperiment(RunConfig.from_dict(task.config), progress=False)
        code = experiment.run()
    except Exception as exc:
        logging.getLogger("VariantsExperiment").error(f"✗ {task.label} seed {task.seed} failed: {exc}")
        result.update(status="failed", error=str(exc), metrics=pd.DataFrame())
        return result

    log = experiment.log
    result["metrics"] = log.to_frame()
    result["best_return"] = log.best_return if log.best_step else float("nan")
    result["final_return"] = float(log.rows[-1]["avg_return"]) if log.rows else float("nan")
    result["diverged"] = log.diverged
    result["divergence_step"] = log.divergence_env_step
    if code == EXIT_DIVERGED:
        result["status"] = "diverged"
    return result


class MultiRunExperiment(ExperimentBase):
    """Fan RunTasks out to a worker pool and collect their results in task order."""

    def __init__(self, output_path: str, workers: int = 1, progress: bool = True):
        super().__init__(output_path=output_path, progress=progress)
        self.workers = workers

    def run_tasks(self, tasks: List[RunTask]) -> List[Dict[str, Any]]:
        self.logger.info(f"Running {len(tasks)} training runs on {self.workers} workers")
        if self.workers > 1:
            with ProcessPoolExecutor(max_workers=self.workers) as executor:
                results = list(executor.map(train_task, tasks))
        else:
            results = [train_task(task) for task in tasks]
        for result in results:
            marker = "✓" if result["status"] == "ok" else "✗"
            self.logger.info(f"{marker} {result['label']} seed {result['seed']}: {result['status']}")
        return results


class VariantsExperiment(MultiRunExperiment):
    """Train the final recipe at each model size; emit per-run metrics and variants.csv."""

    def __init__(
        self,
        base_config: RunConfig,
        seeds: Sequence[int],
        output_path: str = "runs/variants",
        workers: int = 1,
        progress: bool = True,
    ):
        super().__init__(output_path, workers, progress)
        self.base_config = base_config
        self.seeds = list(seeds)

    def build_tasks(self) -> List[RunTask]:
        tasks = []
        for name, (horizon, model_dim, ff_dim, layers) in MODEL_VARIANTS.items():
            for seed in self.seeds:
                config = apply_dotted(
                    self.base_config,
                    {
                        "net.history_horizon": horizon,
                        "net.model_dim": model_dim,
                        "net.ff_dim": ff_dim,
                        "net.num_layers": layers,
                        "agent.seed": seed,
                        "output_dir": str(self.output_path / name / f"seed_{seed}"),
                    },
                )
                tasks.append(RunTask(name, seed, config.to_dict()))
        return tasks

    def run(self) -> int:
        results = self.run_tasks(self.build_tasks())

        frames = []
        for result in results:
            metrics = result.get("metrics")
            if metrics is not None and len(metrics):
                frames.append(metrics.assign(variant=result["label"], seed=result["seed"]))
        curves = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()
        if len(curves):
            curves = curves[["variant", "seed"] + [c for c in curves.columns if c not in ("variant", "seed")]]
        self.save_frame(curves, self.output_path, "variants.csv")

        status = pd.DataFrame(
            [{k: r.get(k) for k in ("label", "seed", "status", "best_return", "final_return", "error")}
             for r in results]
        ).rename(columns={"label": "variant"})
        self.save_frame(status, self.output_path, "variants_status.csv")

        sections = {}
        for name in MODEL_VARIANTS:
            rows = status[status["variant"] == name]
            best = rows["best_return"].astype(float)
            sections[name] = {
                "runs": len(rows),
                "ok": int((rows["status"] == "ok").sum()),
                "mean_best_return": f"{np.nanmean(best):.2f}" if best.notna().any() else "n/a",
            }
        self.write_summary_report(
            self.output_path,
            "TBQN Model Variants Summary Report",
            self.base_config,
            sections,
            ["variants.csv", "variants_status.csv"]
            + [f"{name}/seed_<k>/metrics.csv" for name in MODEL_VARIANTS],
        )
        return EXIT_OK


def parse_run_spec(spec: str) -> Tuple[str, List[str]]:
    """'final+agent.grad_clip=null' -> ('final', ['agent.grad_clip=null'])."""
    preset, *overrides = spec.split("+")
    for text in overrides:
        parse_override(text)
    return preset.strip(), [o.strip() for o in overrides]


class CompareExperiment(MultiRunExperiment):
    """Train several preset/override combinations over seeds; emit comparison.csv."""

    def __init__(
        self,
        run_specs: Sequence[str],
        env: str,
        steps: int,
        seeds: Sequence[int],
        output_path: str = "runs/compare",
        workers: int = 1,
        overrides: Iterable[str] = (),
        progress: bool = True,
    ):
        super().__init__(output_path, workers, progress)
        self.run_specs = list(run_specs)
        self.env = env
        self.steps = steps
        self.seeds = list(seeds)
        self.overrides = list(overrides)

    def build_tasks(self) -> List[RunTask]:
        tasks = []
        for index, spec in enumerate(self.run_specs):
            preset, extra = parse_run_spec(spec)
            for seed in self.seeds:
                config = resolve_config(
                    preset=preset,
                    overrides=self.overrides + extra,
                    env=self.env,
                    steps=self.steps,
                    seed=seed,
                    out=str(self.output_path / f"run{index}_{preset}" / f"seed_{seed}"),
                )
                tasks.append(RunTask(spec, seed, config.to_dict()))
        return tasks

    def run(self) -> int:
        results = self.run_tasks(self.build_tasks())
        columns = ["label", "seed", "status", "best_return", "final_return", "diverged", "divergence_step", "error"]
        comparison = pd.DataFrame([{k: r.get(k) for k in columns} for r in results], columns=columns)
        self.save_frame(comparison, self.output_path, "comparison.csv")

        sections = {}
        reference_label = self.run_specs[0] if self.run_specs else None
        reference_mean = float("nan")
        for spec in self.run_specs:
            rows = comparison[comparison["label"] == spec]
            best = rows["best_return"].astype(float)
            mean_best = float(np.nanmean(best)) if best.notna().any() else float("nan")
            sections[spec] = {
                "seeds": len(rows),
                "diverged": int(rows["diverged"].fillna(False).astype(bool).sum()),
                "mean_best_return": f"{mean_best:.2f}" if np.isfinite(mean_best) else "n/a",
                "max_best_return": f"{np.nanmax(best):.2f}" if best.notna().any() else "n/a",
            }
            if spec == reference_label:
                reference_mean = mean_best
            elif np.isfinite(mean_best) and np.isfinite(reference_mean) and reference_mean != 0:
                change = 100.0 * (mean_best - reference_mean) / abs(reference_mean)
                sections[spec][f"change_vs_{reference_label}"] = f"{change:+.1f}%"
            else:
                sections[spec][f"change_vs_{reference_label}"] = "n/a"
        self.write_summary_report(
            self.output_path,
            "TBQN Comparison Summary Report",
            None,
            sections,
            ["comparison.csv", "run<i>_<preset>/seed_<k>/metrics.csv"],
        )
        return EXIT_OK


def cmd_variants(
    env: str = "cartpole",
    steps: int = 50000,
    seeds: Sequence[int] = (0,),
    out: str = "runs/variants",
    workers: int = 1,
    preset: str = "final",
    overrides: Iterable[str] = (),
    progress: bool = True,
) -> int:
    base_config = resolve_config(preset=preset, overrides=overrides, env=env, steps=steps, out=out)
    return VariantsExperiment(base_config, seeds, out, workers, progress).run()


def cmd_compare(
    run_specs: Sequence[str] = DEFAULT_COMPARISON,
    env: str = "cartpole",
    steps: int = 50000,
    seeds: Sequence[int] = (0, 1, 2),
    out: str = "runs/compare",
    workers: int = 1,
    overrides: Iterable[str] = (),
    progress: bool = True,
) -> int:
    return CompareExperiment(run_specs, env, steps, seeds, out, workers, overrides, progress).run()
