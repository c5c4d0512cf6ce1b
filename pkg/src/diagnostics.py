from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import pandas as pd

from config import config
from logs.logger import logger
from src.exceptions import MalformedFileError
from src.storage import read_jsonl, read_report, write_table


TAXONOMY_COLUMNS = ["run", "true_old", "false_new", "false_old", "true_new", "error_mass",
                    "acc_all", "acc_old", "acc_new", "nmi", "ari", "marginal_kl",
                    "active_prototypes", "num_prototypes"]
EVOLUTION_COLUMNS = ["run", "epoch", "lr", "tau_t", "loss_total", "rep_unsup", "rep_sup",
                     "cls_unsup_ce", "mean_entropy", "cls_sup", "acc_all", "acc_old", "acc_new",
                     "active_prototypes", "marginal_kl", "skipped_batches"]


class DiagnosticsManager:
    """
    Turns run outputs into flat tables for external plotting.

    Reports are keyed by a run label, by default the name of the directory
    holding the report.
    """

    def __init__(self, reports: Dict[str, Dict[str, Any]],
                 metrics: Optional[Dict[str, List[Dict[str, Any]]]] = None) -> None:
        self.reports = reports
        self.metrics = metrics or {}

    @classmethod
    def from_paths(cls, report_paths: Sequence[Union[str, Path]],
                   metrics_paths: Optional[Sequence[Union[str, Path]]] = None) -> "DiagnosticsManager":
        reports = {}
        for path in report_paths:
            label = _run_label(path, reports)
            reports[label] = read_report(path)
        metrics = {}
        for path in metrics_paths or []:
            label = _run_label(path, metrics)
            metrics[label] = read_jsonl(path)
        logger.info(f"Loaded {len(reports)} reports and {len(metrics)} metrics logs")
        return cls(reports, metrics)

    def taxonomy_table(self) -> pd.DataFrame:
        """One row per run: error taxonomy blocks next to the ACC triple."""
        rows = []
        for run, report in self.reports.items():
            try:
                taxonomy, acc = report["taxonomy"], report["acc"]
                rows.append({
                    "run": run,
                    **{key: taxonomy[key] for key in ("true_old", "false_new", "false_old", "true_new")},
                    "error_mass": sum(taxonomy.values()),
                    **{key: acc[key] for key in ("acc_all", "acc_old", "acc_new")},
                    "nmi": acc.get("nmi"),
                    "ari": acc.get("ari"),
                    "marginal_kl": report["marginal_kl"],
                    "active_prototypes": report["active_prototypes"],
                    "num_prototypes": report["num_prototypes"],
                })
            except KeyError as e:
                raise MalformedFileError(f"report '{run}' misses field {e}") from e
        return pd.DataFrame(rows, columns=TAXONOMY_COLUMNS)

    def histogram_table(self) -> pd.DataFrame:
        """Long format: run, class_id, predicted_count, true_count."""
        frames = []
        for run, report in self.reports.items():
            histogram = report["histogram"]
            frames.append(pd.DataFrame({
                "run": run,
                "class_id": range(len(histogram["true_counts"])),
                "predicted_count": histogram["predicted_counts"],
                "true_count": histogram["true_counts"],
            }))
        if not frames:
            return pd.DataFrame(columns=["run", "class_id", "predicted_count", "true_count"])
        return pd.concat(frames, ignore_index=True)

    def evolution_table(self) -> pd.DataFrame:
        """Per-epoch losses and metrics of every metrics log; null where an epoch skipped evaluation."""
        rows = []
        for run, records in self.metrics.items():
            for record in records:
                losses = record.get("losses", {})
                rows.append({
                    "run": run,
                    "epoch": record["epoch"],
                    "lr": record.get("lr"),
                    "tau_t": record.get("tau_t"),
                    "loss_total": losses.get("total"),
                    **{key: losses.get(key) for key in ("rep_unsup", "rep_sup", "cls_unsup_ce",
                                                        "mean_entropy", "cls_sup")},
                    **{key: record.get(key) for key in ("acc_all", "acc_old", "acc_new",
                                                        "active_prototypes", "marginal_kl",
                                                        "skipped_batches")},
                })
        return pd.DataFrame(rows, columns=EVOLUTION_COLUMNS)

    def write_all(self, out_dir: Union[str, Path]) -> List[Path]:
        out_dir = Path(out_dir)
        written = [
            write_table(self.taxonomy_table(), out_dir / config.get("output.taxonomy_table"), "Taxonomy table"),
            write_table(self.histogram_table(), out_dir / config.get("output.histogram_table"), "Histogram table"),
        ]
        if self.metrics:
            written.append(write_table(self.evolution_table(), out_dir / config.get("output.evolution_table"),
                                       "Evolution table"))
        return written


def _run_label(path: Union[str, Path], taken: Dict[str, Any]) -> str:
    path = Path(path)
    label = path.parent.name or path.stem
    if label in taken:
        label = f"{label}_{len(taken)}"
    return label
