import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import pandas as pd

from config import config
from logs.logger import logger
from src.dataset import GcdDataset, load, save
from src.exceptions import MalformedFileError
from src.models import EvaluationReport, ExperimentConfig, MetricsRecord
from src.network import GcdModel, load_checkpoint, save_checkpoint
from src.utils import write_resolved_config


class RunStore:
    """
    Manages the files of one run directory.

    File names come from the `output` section of config.yaml so every command
    reads and writes the same layout:

        <run_dir>/config.yaml     resolved experiment config
        <run_dir>/model.ckpt      trained parameters
        <run_dir>/metrics.jsonl   one JSON object per epoch
        <run_dir>/report.json     final evaluation report
        <run_dir>/histogram.csv   class_id, predicted_count, true_count
    """

    def __init__(self, run_dir: Union[str, Path]) -> None:
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)

    def path(self, key: str) -> Path:
        """Path of the file registered as `output.<key>` in config.yaml."""
        return self.run_dir / config.get(f"output.{key}")

    def write_config(self, cfg: ExperimentConfig) -> Path:
        """
        Writes the resolved experiment config as flat YAML.

        Args:
            cfg: The config the run was started with.

        Returns:
            Path of the written config.yaml.
        """
        path = write_resolved_config(cfg, self.path("resolved_config"))
        logger.info(f"Resolved config written: {path}")
        return path

    def write_dataset(self, ds: GcdDataset) -> Path:
        """Saves `ds` in the binary dataset layout and returns its path."""
        path = self.path("dataset")
        save(ds, path)
        return path

    def read_dataset(self) -> GcdDataset:
        """
        Raises:
            MalformedFileError: If the dataset file is corrupt.
        """
        return load(self.path("dataset"))

    def write_model(self, model: GcdModel) -> Path:
        """
        Writes the model checkpoint.

        Args:
            model: Trained parameters and architecture.

        Returns:
            Path of model.ckpt.
        """
        path = self.path("checkpoint")
        save_checkpoint(model, path)
        logger.info(f"Checkpoint written: {path}")
        return path

    def read_model(self) -> GcdModel:
        """
        Loads model.ckpt.

        Raises:
            MalformedFileError: If the checkpoint is corrupt.
        """
        return load_checkpoint(self.path("checkpoint"))

    def start_metrics(self) -> Path:
        """Truncates metrics.jsonl; epochs are then appended as they finish."""
        path = self.path("metrics")
        path.write_text("", encoding="utf-8")
        return path

    def append_metrics(self, record: MetricsRecord) -> None:
        """Appends one epoch as a JSON line."""
        with open(self.path("metrics"), "a", encoding="utf-8") as f:
            f.write(json.dumps(record.serialize()) + "\n")

    def read_metrics(self) -> List[Dict[str, Any]]:
        """
        Returns:
            One dict per logged epoch, in order.
        """
        return read_jsonl(self.path("metrics"))

    def write_report(self, report: EvaluationReport) -> Path:
        """Writes report.json and its histogram.csv companion."""
        path = self.path("report")
        with open(path, "w", encoding="utf-8") as f:
            json.dump(report.serialize(), f, indent=2)
        histogram_frame(report).to_csv(self.path("histogram"), index=False)
        logger.info(f"Report written: {path} (acc_all={report.acc.acc_all:.4f})")
        return path

    def read_report(self) -> Dict[str, Any]:
        """Parsed report.json of the run."""
        return read_report(self.path("report"))


def histogram_frame(report: EvaluationReport) -> pd.DataFrame:
    """class_id, predicted_count, true_count per class of the report histogram."""
    histogram = report.histogram
    return pd.DataFrame({
        "class_id": range(len(histogram.true_counts)),
        "predicted_count": histogram.predicted_counts,
        "true_count": histogram.true_counts,
    })


def read_jsonl(path: Union[str, Path]) -> List[Dict[str, Any]]:
    """
    Reads a JSON-lines file, skipping blank lines.

    Raises:
        OSError: If the file cannot be opened.
        MalformedFileError: If a line is not valid JSON.
    """
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                logger.error(f"Error decoding JSON in {path} line {number}: {e}")
                raise MalformedFileError(f"{path}: invalid JSON at line {number}") from e
    return records


def read_report(path: Union[str, Path]) -> Dict[str, Any]:
    """
    Reads an evaluation report written by `RunStore.write_report`.

    Args:
        path: report.json file.

    Returns:
        The report as a plain dict.

    Raises:
        OSError: If the file cannot be opened.
        MalformedFileError: If it is not a report object.
    """
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise MalformedFileError(f"{path}: invalid JSON at line {e.lineno}") from e
    if not isinstance(data, dict) or "acc" not in data or "histogram" not in data:
        raise MalformedFileError(f"{path}: not an evaluation report")
    return data


def write_table(frame: pd.DataFrame, path: Union[str, Path], label: Optional[str] = None) -> Path:
    """
    Writes `frame` as CSV without the index, creating parent directories.

    Args:
        frame: Table to write.
        path: Destination CSV.
        label: Name used in the log line.

    Returns:
        The destination path.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    logger.info(f"{label or 'Table'} written: {path} ({len(frame)} rows)")
    return path
