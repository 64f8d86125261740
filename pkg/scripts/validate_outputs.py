#!/usr/bin/env python3
"""
TBQN Output Validation Diagnostic Tool

Checks a run/study output directory: CSV schemas, finite values, importance
normalization, trial counts, checkpoint loadability and the resolved-config
snapshot. Writes validation_report.txt into the directory.

Usage:
    python scripts/run_tbqn.py validate --out runs/demo
"""

import logging
from pathlib import Path
from typing import Dict, List

import numpy as np
import pandas as pd

from dqn_agent import METRICS_COLUMNS
from run_config import RESOLVED_CONFIG_NAME, RunConfig, load_yaml
from tbqn_errors import TBQNError
from transformer_qnet import QNetwork

logger = logging.getLogger(__name__)

STATUS_GOOD = "GOOD"
STATUS_WARNINGS = "WARNINGS"
STATUS_CRITICAL = "CRITICAL_ISSUES"


def _status(issues: List[str], warnings: List[str]) -> str:
    if issues:
        return STATUS_CRITICAL
    return STATUS_WARNINGS if warnings else STATUS_GOOD


class OutputValidator:
    """Validate every known output file found in a directory."""

    def __init__(self, output_dir: str):
        self.output_dir = Path(output_dir)
        self.checks = {
            "metrics.csv": self._validate_metrics,
            "trials.csv": self._validate_trials,
            "importance.csv": self._validate_importance,
            "marginals.csv": self._validate_marginals,
            "variants.csv": self._validate_curves,
            "comparison.csv": self._validate_comparison,
            RESOLVED_CONFIG_NAME: self._validate_config,
        }

    def validate_all(self) -> Dict[str, Dict]:
        if not self.output_dir.is_dir():
            raise FileNotFoundError(f"output directory '{self.output_dir}' does not exist")
        logger.info(f"Validating outputs in {self.output_dir}...")

        results: Dict[str, Dict] = {}
        for filename, check in self.checks.items():
            path = self.output_dir / filename
            if not path.exists():
                continue
            try:
                results[filename] = check(path)
            except Exception as e:
                results[filename] = {"status": STATUS_CRITICAL, "issues": [f"Error reading {filename}: {e}"]}

        for manifest in sorted(self.output_dir.glob("checkpoint_*.json")):
            results[manifest.name] = self._validate_checkpoint(manifest)

        if not results:
            results["directory"] = {
                "status": STATUS_WARNINGS,
                "issues": [],
                "warnings": ["No known TBQN output files found"],
            }
        self._generate_validation_report(results)
        return results

    def _validate_metrics(self, path: Path) -> Dict:
        df = pd.read_csv(path)
        issues, warnings = [], []
        if list(df.columns) != METRICS_COLUMNS:
            issues.append(f"Columns {list(df.columns)} do not match schema {METRICS_COLUMNS}")
            return {"status": _status(issues, warnings), "issues": issues, "warnings": warnings, "rows": len(df)}
        if df.empty:
            warnings.append("No evaluation rows (run shorter than eval_every or diverged early)")
        else:
            if not df["step"].is_monotonic_increasing or df["step"].duplicated().any():
                issues.append("step column is not strictly increasing")
            if not np.isfinite(df["avg_return"]).all():
                issues.append("avg_return has non-finite values")
            if (df["epsilon"] < 0).any() or (df["epsilon"] > 1).any():
                issues.append("epsilon outside [0, 1]")
            if df["loss"].isnull().all():
                warnings.append("No gradient steps logged (still collecting at every evaluation)")
        return {"status": _status(issues, warnings), "issues": issues, "warnings": warnings, "rows": len(df)}

    def _validate_trials(self, path: Path) -> Dict:
        df = pd.read_csv(path, keep_default_na=False, na_values=[""])
        issues, warnings = [], []
        required = {"trial", "seed", "mean_score", "diverged", "steps_trained"}
        missing = required - set(df.columns)
        if missing:
            issues.append(f"Missing columns: {sorted(missing)}")
        elif not df.empty:
            if df["trial"].duplicated().any():
                issues.append("Duplicate trial indices")
            if sorted(df["trial"]) != list(range(len(df))):
                warnings.append("Trial indices are not 0..n-1")
            if not any(c.startswith("score_") for c in df.columns):
                issues.append("No score_<env> columns")
            diverged = int(df["diverged"].astype(str).str.lower().eq("true").sum())
            if diverged:
                warnings.append(f"{diverged} of {len(df)} trials diverged")
        return {"status": _status(issues, warnings), "issues": issues, "warnings": warnings, "rows": len(df)}

    def _validate_importance(self, path: Path) -> Dict:
        df = pd.read_csv(path)
        issues, warnings = [], []
        if "parameter" not in df.columns or "average" not in df.columns:
            issues.append("importance.csv needs parameter and average columns")
        elif df["average"].isnull().all():
            warnings.append("Importance not estimated (too few scored trials)")
        else:
            for column in [c for c in df.columns if c != "parameter"]:
                values = df[column]
                if (values < 0).any():
                    issues.append(f"{column}: negative importance")
                if abs(values.sum() - 1.0) > 1e-6:
                    issues.append(f"{column}: importances sum to {values.sum():.6f}, expected 1")
        return {"status": _status(issues, warnings), "issues": issues, "warnings": warnings, "rows": len(df)}

    def _validate_marginals(self, path: Path) -> Dict:
        df = pd.read_csv(path)
        issues, warnings = [], []
        if not df.empty and not np.isfinite(df["mean_score"]).all():
            issues.append("marginals contain non-finite mean scores")
        return {"status": _status(issues, warnings), "issues": issues, "warnings": warnings, "rows": len(df)}

    def _validate_curves(self, path: Path) -> Dict:
        df = pd.read_csv(path)
        issues, warnings = [], []
        if not df.empty:
            missing = {"variant", "seed", *METRICS_COLUMNS} - set(df.columns)
            if missing:
                issues.append(f"Missing columns: {sorted(missing)}")
            else:
                runs = df.groupby(["variant", "seed"]).ngroups
                if df["variant"].nunique() < 5:
                    warnings.append(f"Only {df['variant'].nunique()} variants produced curves")
                logger.info(f"variants.csv holds {runs} curves")
        return {"status": _status(issues, warnings), "issues": issues, "warnings": warnings, "rows": len(df)}

    def _validate_comparison(self, path: Path) -> Dict:
        df = pd.read_csv(path)
        issues, warnings = [], []
        failed = df[df["status"] == "failed"] if "status" in df.columns else df.iloc[0:0]
        if len(failed):
            warnings.append(f"{len(failed)} runs failed")
        return {"status": _status(issues, warnings), "issues": issues, "warnings": warnings, "rows": len(df)}

    def _validate_config(self, path: Path) -> Dict:
        issues = []
        try:
            RunConfig.from_dict(load_yaml(path)).validate()
        except TBQNError as e:
            issues.append(f"Snapshot does not validate: {e}")
        return {"status": _status(issues, []), "issues": issues, "warnings": []}

    def _validate_checkpoint(self, manifest: Path) -> Dict:
        issues = []
        info = {}
        try:
            network, metadata = QNetwork.load(manifest)
            info = {"parameters": network.parameter_count(), "env": metadata.get("env", "?")}
        except TBQNError as e:
            issues.append(str(e))
        return {"status": _status(issues, []), "issues": issues, "warnings": [], "file_info": info}

    def _generate_validation_report(self, results: Dict[str, Dict]):
        report_path = self.output_dir / "validation_report.txt"

        with open(report_path, "w") as f:
            f.write("TBQN OUTPUT VALIDATION REPORT\n")
            f.write("=" * 50 + "\n\n")

            critical = sum(1 for r in results.values() if r.get("status") == STATUS_CRITICAL)
            warned = sum(1 for r in results.values() if r.get("status") == STATUS_WARNINGS)

            f.write("OVERALL STATUS\n")
            f.write("-" * 15 + "\n")
            if critical > 0:
                f.write(f"🚨 CRITICAL: {critical} files have critical issues\n")
            elif warned > 0:
                f.write(f"⚠️  WARNING: {warned} files have warnings\n")
            else:
                f.write("✅ GOOD: All files passed validation\n")
            f.write("\n")

            for name, result in results.items():
                f.write(f"{name.upper()}\n")
                f.write("-" * len(name) + "\n")
                f.write(f"Status: {result.get('status', 'UNKNOWN')}\n")
                if "rows" in result:
                    f.write(f"Rows: {result['rows']:,}\n")
                for key, value in result.get("file_info", {}).items():
                    f.write(f"{key}: {value}\n")
                if result.get("issues"):
                    f.write("ISSUES:\n")
                    for issue in result["issues"]:
                        f.write(f"  • {issue}\n")
                if result.get("warnings"):
                    f.write("WARNINGS:\n")
                    for warning in result["warnings"]:
                        f.write(f"  • {warning}\n")
                f.write("\n")

        logger.info(f"Validation report saved to: {report_path}")


def cmd_validate(output_dir: str) -> Dict[str, Dict]:
    return OutputValidator(output_dir).validate_all()


def has_critical_issues(results: Dict[str, Dict]) -> bool:
    return any(r.get("status") == STATUS_CRITICAL for r in results.values())
