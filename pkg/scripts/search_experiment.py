# scripts/search_experiment.py
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd

from envs import resolve_env_name
from experiment_base import ExperimentBase
from hpo import (
    SAMPLERS,
    SearchSpace,
    TrialRecord,
    load_search_space,
    mdi_importance,
    records_to_frame,
    run_study,
    study_two_report,
)
from run_config import RunConfig, resolve_config
from tbqn_errors import EXIT_OK, ConfigError, InsufficientDataError
from tensor_core import RngState


class SearchExperiment(ExperimentBase):
    """Hyperparameter study: trials.csv, importance.csv, marginals.csv, top_samples.csv."""

    def __init__(
        self,
        space_path: str,
        sampler: str = "tpe",
        trials: int = 30,
        envs: Sequence[str] = ("cartpole",),
        steps: int = 15000,
        runs_per_sample: int = 2,
        seed: int = 0,
        output_path: str = "runs/search",
        workers: int = 1,
        base_config: Optional[RunConfig] = None,
        forest_size: int = 100,
        progress: bool = True,
    ):
        super().__init__(output_path=output_path, progress=progress)
        if sampler not in SAMPLERS:
            raise ConfigError("sampler", f"must be one of {sorted(SAMPLERS)}, got '{sampler}'")
        self.space_path = space_path
        self.sampler = sampler
        self.trials = trials
        self.envs = [resolve_env_name(e) for e in envs]
        self.steps = steps
        self.runs_per_sample = runs_per_sample
        self.seed = seed
        self.workers = workers
        self.base_config = base_config or RunConfig()
        self.forest_size = forest_size
        self.records: List[TrialRecord] = []

    def validate_trials(self, frame: pd.DataFrame) -> Dict[str, Any]:
        """Quality metrics for a trials.csv frame."""
        score_cols = [c for c in frame.columns if c.startswith("score_")]
        failed = int((frame["error"] != "").sum()) if "error" in frame.columns else 0
        validation = {
            "total_trials": len(frame),
            "expected_trials": self.trials,
            "diverged_trials": int(frame["diverged"].sum()) if "diverged" in frame.columns else 0,
            "failed_trials": failed,
            "best_mean_score": float(frame["mean_score"].max()) if len(frame) else float("nan"),
            "missing_data_by_column": frame[score_cols].isnull().sum().to_dict(),
        }
        validation["data_quality_flags"] = {
            "trial_count_mismatch": len(frame) != self.trials,
            "duplicate_trial_ids": bool(frame["trial"].duplicated().any()),
            "all_trials_failed": failed == len(frame),
        }
        quality_issues = sum(validation["data_quality_flags"].values())
        validation["data_quality_score"] = max(0, 100 - quality_issues * 25)
        return validation

    def run(self) -> int:
        space = load_search_space(self.space_path)
        run_dir = self.run_dir()
        self.logger.info(
            f"Starting {self.sampler} study: {self.trials} trials x {self.runs_per_sample} runs "
            f"on {', '.join(self.envs)} at {self.steps} steps ({self.workers} workers)"
        )
        self.save_config(self.base_config, run_dir)

        self.records = run_study(
            space,
            self.sampler,
            self.trials,
            self.envs,
            self.steps,
            self.runs_per_sample,
            RngState(self.seed),
            base_config=self.base_config,
            workers=self.workers,
            progress=self.progress,
        )

        trials = records_to_frame(self.records, space)
        self.save_frame(trials, run_dir, "trials.csv", self.validate_trials(trials))

        importance = self.importance_frame(space)
        self.save_frame(importance, run_dir, "importance.csv")

        report = study_two_report(self.records, space)
        self.save_frame(report.marginals, run_dir, "marginals.csv")
        self.save_frame(report.top_samples, run_dir, "top_samples.csv")

        ranking = {
            row["parameter"]: f"{row['average']:.3f}" if np.isfinite(row["average"]) else "n/a"
            for _, row in importance.iterrows()
        }
        self.write_summary_report(
            run_dir,
            "TBQN Search Summary Report",
            self.base_config,
            {
                "Study": {
                    "space": self.space_path,
                    "sampler": f"{self.sampler} ({self.decoder.decode_sampler(self.sampler)})",
                    "trials": len(self.records),
                    "environments": ", ".join(self.envs),
                    "steps_per_run": self.steps,
                    "runs_per_sample": self.runs_per_sample,
                    "diverged_trials": sum(r.diverged for r in self.records),
                    "failed_trials": sum(r.error is not None for r in self.records),
                },
                "MDI importance (averaged)": ranking,
            },
            ["trials.csv", "trials_validation.txt", "importance.csv", "marginals.csv",
             "top_samples.csv", "resolved_config.yaml", "summary_report.txt"],
        )
        self.logger.info(f"✅ Study complete: {run_dir}")
        return EXIT_OK

    def importance_frame(self, space: SearchSpace) -> pd.DataFrame:
        try:
            report = mdi_importance(self.records, space, self.forest_size, RngState(self.seed).spawn("mdi"))
        except InsufficientDataError as exc:
            self.logger.warning(f"⚠️ Importance not estimated: {exc}")
            return pd.DataFrame(
                {"parameter": sorted(p.name for p in space), "average": float("nan")}
            )
        return report.to_frame()


def cmd_search(
    space_path: str,
    sampler: str = "tpe",
    trials: int = 30,
    envs: Iterable[str] = ("cartpole",),
    steps: int = 15000,
    out: str = "runs/search",
    seed: int = 0,
    workers: int = 1,
    runs_per_sample: int = 2,
    preset: Optional[str] = "final",
    config_path: Optional[str] = None,
    overrides: Iterable[str] = (),
    progress: bool = True,
) -> int:
    base_config = resolve_config(preset=preset, config_path=config_path, overrides=overrides, out=out)
    experiment = SearchExperiment(
        space_path,
        sampler=sampler,
        trials=trials,
        envs=list(envs),
        steps=steps,
        runs_per_sample=runs_per_sample,
        seed=seed,
        output_path=out,
        workers=workers,
        base_config=base_config,
        progress=progress,
    )
    return experiment.run()
