# scripts/experiment_base.py
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from config_decoder import ConfigDecoder
from dqn_agent import METRICS_COLUMNS, MetricsLog
from run_config import RESOLVED_CONFIG_NAME, RunConfig


class ExperimentBase:
    """Base class for TBQN experiments: output directory, logging, CSV + validation reports."""

    def __init__(self, output_path: str = "runs", progress: bool = True):
        self.output_path = Path(output_path)
        self.output_path.mkdir(parents=True, exist_ok=True)
        self.progress = progress

        # Setup logging
        logging.basicConfig(
            level=logging.INFO,
            format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        )
        self.logger = logging.getLogger(self.__class__.__name__)
        self.decoder = ConfigDecoder()

    def run_dir(self, *parts: str) -> Path:
        path = self.output_path.joinpath(*parts)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def save_config(self, config: RunConfig, directory: Path) -> Path:
        """Write the resolved-config snapshot next to the run's outputs."""
        path = config.save(Path(directory) / RESOLVED_CONFIG_NAME)
        self.logger.info(f"Saved resolved config to {path}")
        return path

    def validate_metrics(self, frame: pd.DataFrame, log: Optional[MetricsLog] = None) -> Dict[str, Any]:
        """Quality metrics for a metrics.csv frame."""
        validation: Dict[str, Any] = {
            "total_rows": len(frame),
            "columns": list(frame.columns),
            "missing_data_by_column": frame.isnull().sum().to_dict(),
        }
        if len(frame) > 0:
            returns = frame["avg_return"]
            validation.update(
                {
                    "first_step": int(frame["step"].iloc[0]),
                    "last_step": int(frame["step"].iloc[-1]),
                    "best_avg_return": float(returns.max()),
                    "final_avg_return": float(returns.iloc[-1]),
                }
            )

        validation["data_quality_flags"] = {
            "schema_mismatch": list(frame.columns) != METRICS_COLUMNS,
            "no_evaluation_rows": len(frame) == 0,
            "non_finite_returns": bool(len(frame) > 0 and not np.isfinite(frame["avg_return"]).all()),
            "steps_not_increasing": bool(len(frame) > 1 and not frame["step"].is_monotonic_increasing),
            "diverged": bool(log.diverged) if log is not None else False,
        }
        quality_issues = sum(validation["data_quality_flags"].values())
        validation["data_quality_score"] = max(0, 100 - quality_issues * 25)

        self.logger.info(f"Validation complete: {validation['total_rows']} evaluation rows")
        issues = [k for k, v in validation["data_quality_flags"].items() if v]
        if issues:
            self.logger.warning(f"Metrics quality issues detected: {', '.join(issues)}")
        else:
            self.logger.info("✅ No metrics quality issues detected")
        return validation

    def save_frame(
        self,
        frame: pd.DataFrame,
        directory: Path,
        filename: str,
        validation_info: Optional[Dict] = None,
    ) -> Path:
        """Save a CSV and, when validation info is given, a validation report next to it."""
        output_path = Path(directory) / filename
        frame.to_csv(output_path, index=False)

        if validation_info:
            report_path = Path(directory) / filename.replace(".csv", "_validation.txt")
            with open(report_path, "w") as f:
                f.write("TBQN OUTPUT VALIDATION REPORT\n")
                f.write("=" * 30 + "\n\n")

                f.write("BASIC STATISTICS\n")
                f.write("-" * 16 + "\n")
                for key, value in validation_info.items():
                    if key not in ["missing_data_by_column", "data_quality_flags", "columns"]:
                        f.write(f"{key}: {value}\n")
                f.write("\n")

                if "data_quality_flags" in validation_info:
                    f.write("DATA QUALITY ASSESSMENT\n")
                    f.write("-" * 23 + "\n")
                    for flag, has_issue in validation_info["data_quality_flags"].items():
                        status = "❌ FAIL" if has_issue else "✅ PASS"
                        f.write(f"{flag}: {status}\n")
                    quality_score = validation_info.get("data_quality_score", 0)
                    f.write(f"\nOverall Quality Score: {quality_score}/100\n\n")

                missing = {k: v for k, v in validation_info.get("missing_data_by_column", {}).items() if v}
                if missing:
                    f.write("MISSING DATA\n")
                    f.write("-" * 12 + "\n")
                    for col, count in sorted(missing.items(), key=lambda x: x[1], reverse=True):
                        f.write(f"{col}: {count}\n")

        self.logger.info(f"Saved {len(frame)} rows to {output_path}")
        return output_path

    def write_summary_report(
        self,
        directory: Path,
        title: str,
        config: Optional[RunConfig],
        sections: Dict[str, Dict[str, Any]],
        files: List[str],
    ) -> Path:
        """Plain-text run summary: decoded config, result sections and created files."""
        report_path = Path(directory) / "summary_report.txt"
        with open(report_path, "w") as f:
            f.write(f"{title.upper()}\n")
            f.write("=" * max(len(title), 30) + "\n\n")

            if config is not None:
                f.write("CONFIGURATION\n")
                f.write("-" * 13 + "\n")
                for key, value in self.decoder.decode_config(config.to_dict()).items():
                    f.write(f"{key}: {value}\n")
                f.write("\n")

            for heading, values in sections.items():
                f.write(f"{heading.upper()}\n")
                f.write("-" * len(heading) + "\n")
                for key, value in values.items():
                    f.write(f"{key}: {value}\n")
                f.write("\n")

            f.write("FILES CREATED\n")
            f.write("-" * 13 + "\n")
            for name in files:
                f.write(f"📁 {name}\n")

        self.logger.info(f"Summary report saved to {report_path}")
        return report_path

    def run(self) -> int:
        """Main experiment method. Override in subclasses; returns an exit code."""
        raise NotImplementedError("Subclasses must implement run() method")
