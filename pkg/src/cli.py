import argparse
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd
import yaml

from config import config
from logs.logger import logger
from src.clustering import kmeans, kmeanspp_init, ss_kmeans
from src.dataset import GcdDataset, generate, load, save
from src.diagnostics import DiagnosticsManager
from src.evaluation import evaluate
from src.exceptions import (GcdError, InvalidConfigError, InvariantViolationError, MalformedFileError,
                            NonFiniteValueError, NumericalAbortError)
from src.models import EvaluationReport, ExperimentConfig, layer_preset
from src.network import load_checkpoint
from src.storage import RunStore, write_table
from src.trainer import evaluate_model, train
from src.utils import derive_seed, load_experiment_config

PathLike = Union[str, Path]

SWEEP_AXES = {
    "eps": "entropy_weight",
    "k": "num_prototypes",
    "k_ratio": "num_prototypes",
    "supervision": "supervision",
    "preset": "preset",
}
SUMMARY_COLUMNS = ["sweep_value", "seed", "acc_all", "acc_old", "acc_new", "marginal_kl",
                   "active_prototypes", "wall_seconds"]

# First match wins; subclasses precede GcdError.
EXIT_CODES: List[Tuple[type, int]] = [
    (InvalidConfigError, 2),
    (MalformedFileError, 3),
    (InvariantViolationError, 3),
    (OSError, 3),
    (NumericalAbortError, 4),
    (NonFiniteValueError, 4),
    (GcdError, 1),
]


# --------------------------------------------------------------------------- commands


def cmd_gen(config_path: Optional[PathLike] = None, out_path: Optional[PathLike] = None,
            overrides: Optional[List[str]] = None) -> Path:
    """Generates the synthetic dataset described by the experiment config."""
    cfg = load_experiment_config(config_path, overrides)
    out_path = Path(out_path) if out_path else Path(cfg.output_dir) / config.get("output.dataset")
    ds = generate(cfg.to_gen_config())
    return save(ds, out_path)


def _dataset_for(cfg: ExperimentConfig, dataset_path: Optional[PathLike]) -> GcdDataset:
    if dataset_path is not None:
        return load(dataset_path)
    return generate(cfg.to_gen_config())


def run_training(cfg: ExperimentConfig, ds: GcdDataset, out_dir: PathLike) -> EvaluationReport:
    """
    Trains one model and fills its run directory.

    The resolved config goes in first, metrics.jsonl grows one line per
    epoch, and model.ckpt plus report.json are written at the end.
    """
    store = RunStore(out_dir)
    store.write_config(cfg)
    train_cfg = cfg.to_train_config()
    model_cfg = cfg.to_model_config(feature_dim=ds.feature_dim,
                                    num_prototypes=cfg.num_prototypes or ds.num_classes)
    store.start_metrics()
    model, _ = train(train_cfg, ds, model_cfg, on_epoch=store.append_metrics)
    store.write_model(model)
    report = evaluate_model(model, ds, train_cfg)
    store.write_report(report)
    return report


def cmd_train(config_path: Optional[PathLike] = None, dataset_path: Optional[PathLike] = None,
              out_dir: Optional[PathLike] = None, overrides: Optional[List[str]] = None) -> EvaluationReport:
    """Trains on the given dataset, or on freshly generated data when none is given."""
    cfg = load_experiment_config(config_path, overrides)
    ds = _dataset_for(cfg, dataset_path)
    out_dir = out_dir or cfg.output_dir
    logger.info(f"Training run started: {out_dir}")
    report = run_training(cfg, ds, out_dir)
    logger.info(f"Training run finished: {out_dir}")
    return report


def cmd_eval(checkpoint: PathLike, dataset_path: PathLike, out_dir: Optional[PathLike] = None,
             config_path: Optional[PathLike] = None, overrides: Optional[List[str]] = None) -> EvaluationReport:
    """Prototype-argmax evaluation of a checkpoint over D^u."""
    cfg = load_experiment_config(config_path, overrides)
    model = load_checkpoint(checkpoint)
    ds = load(dataset_path)
    report = evaluate_model(model, ds, cfg.to_train_config())
    report = report.model_copy(update={"extra": {"source": "parametric", "checkpoint": str(checkpoint)}})
    RunStore(out_dir or Path(checkpoint).parent / "eval").write_report(report)
    return report


def cmd_kmeans(dataset_path: PathLike, mode: str = "semi", k: Optional[int] = None, seed: int = 0,
               out_dir: Optional[PathLike] = None, checkpoint: Optional[PathLike] = None,
               max_iters: int = 100, labelled_only_centroids: bool = False,
               config_path: Optional[PathLike] = None, overrides: Optional[List[str]] = None) -> EvaluationReport:
    """
    Clustering baseline over D^u.

    `plain` runs k-means++ and Lloyd on every row; `semi` pins labelled rows
    to their class clusters. With a checkpoint the clustering runs on the
    model's classifier-input features and the report also carries the
    parametric head's metrics and the wall-clock time of both paths.
    """
    if mode not in ("plain", "semi"):
        raise InvalidConfigError(f"k-means mode must be 'plain' or 'semi', got '{mode}'")
    cfg = load_experiment_config(config_path, overrides)
    ds = load(dataset_path)
    k = k or ds.num_classes
    model = load_checkpoint(checkpoint) if checkpoint is not None else None
    features = model.features(ds.features) if model is not None else ds.features

    started = time.perf_counter()
    if mode == "semi":
        result = ss_kmeans(ds, features, k, seed, max_iters=max_iters,
                           labelled_only_centroids=labelled_only_centroids)
    else:
        result = kmeans(features, kmeanspp_init(features, k, seed), max_iters=max_iters)
    kmeans_seconds = time.perf_counter() - started

    rows = ds.unlabelled_indices
    train_cfg = cfg.to_train_config()
    report = evaluate(ds.labels[rows], result.assignments[rows], ds.old_classes, k,
                      num_classes=ds.num_classes, rematch_splits=train_cfg.rematch_splits,
                      active_min_count=train_cfg.active_min_count)
    extra: Dict[str, Any] = {"source": f"{mode}_kmeans", "k": k, "seed": seed,
                             "iterations": result.iterations_run, "objective": result.objective,
                             "kmeans_seconds": kmeans_seconds}
    if model is not None:
        started = time.perf_counter()
        parametric = evaluate_model(model, ds, train_cfg)
        extra.update({"checkpoint": str(checkpoint),
                      "parametric_seconds": time.perf_counter() - started,
                      "parametric": parametric.flat_metrics()})
    report = report.model_copy(update={"extra": extra})
    RunStore(out_dir or Path(cfg.output_dir) / f"{mode}_kmeans").write_report(report)
    logger.info(f"{mode} k-means: acc_all={report.acc.acc_all:.4f} in {kmeans_seconds:.3f}s")
    return report


def cmd_diagnose(report_paths: Sequence[PathLike], out_dir: PathLike,
                 metrics_paths: Optional[Sequence[PathLike]] = None) -> List[Path]:
    """Taxonomy and histogram tables from reports; evolution table from metrics logs."""
    manager = DiagnosticsManager.from_paths(report_paths, metrics_paths)
    return manager.write_all(out_dir)


def sweep_points(axis: str, values: Sequence[Any], num_classes: int) -> List[Tuple[Any, Dict[str, Any]]]:
    """(sweep value, config overrides) per value along `axis`."""
    if axis not in SWEEP_AXES:
        raise InvalidConfigError(f"unknown sweep axis '{axis}', expected one of {sorted(SWEEP_AXES)}")
    if not values:
        raise InvalidConfigError("sweep needs at least one value")
    points = []
    for value in values:
        if axis == "k_ratio":
            setting = max(2, int(round(float(value) * num_classes)))
        else:
            setting = value
        points.append((value, {SWEEP_AXES[axis]: setting}))
    return points


def _run_sweep_point(task: Tuple[Dict[str, Any], str, str, Any]) -> Dict[str, Any]:
    values, dataset_path, run_dir, sweep_value = task
    cfg = ExperimentConfig(**values)
    ds = load(dataset_path)
    started = time.perf_counter()
    report = run_training(cfg, ds, run_dir)
    return {"sweep_value": sweep_value, "seed": cfg.seed,
            "acc_all": report.acc.acc_all, "acc_old": report.acc.acc_old, "acc_new": report.acc.acc_new,
            "marginal_kl": report.marginal_kl, "active_prototypes": report.active_prototypes,
            "wall_seconds": time.perf_counter() - started}


def cmd_sweep(config_path: Optional[PathLike] = None, axis: str = "eps", values: Sequence[Any] = (),
              seeds: Sequence[int] = (0,), out_dir: Optional[PathLike] = None,
              dataset_path: Optional[PathLike] = None, workers: int = 1,
              overrides: Optional[List[str]] = None) -> Path:
    """
    One training run per (value, seed) and a summary.csv row for each.

    Run seeds are SeedSequence([seed, repetition]) so every sweep value
    trains with the same seeds. All runs share one dataset, written once
    into the sweep directory unless a dataset file is given.
    """
    cfg = load_experiment_config(config_path, overrides)
    out_dir = Path(out_dir or cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if dataset_path is None:
        dataset_path = save(generate(cfg.to_gen_config()), out_dir / config.get("output.dataset"))
    ds = load(dataset_path)
    if workers < 1:
        raise InvalidConfigError(f"workers must be >= 1, got {workers}")

    base = cfg.serialize()
    tasks = []
    for value, update in sweep_points(axis, values, ds.num_classes):
        for repetition, base_seed in enumerate(seeds):
            run_seed = derive_seed(base_seed, repetition)
            point_values = {**update, "seed": run_seed}
            # base fields already include the base preset; only a swept preset is layered again
            try:
                merged = layer_preset(base, point_values) if axis == "preset" else {**base, **point_values}
                point = ExperimentConfig(**merged)
            except ValueError as e:
                raise InvalidConfigError(f"sweep value {axis}={value}: {e}") from e
            run_dir = out_dir / f"{axis}_{value}_seed{base_seed}"
            tasks.append((point.serialize(), str(dataset_path), str(run_dir), value))

    logger.info(f"Sweep over {axis}={list(values)} x seeds={list(seeds)}: {len(tasks)} runs, {workers} workers")
    if workers == 1:
        rows = [_run_sweep_point(task) for task in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_sweep_point, tasks))

    path = write_table(pd.DataFrame(rows, columns=SUMMARY_COLUMNS), out_dir / config.get("output.summary"),
                       "Sweep summary")
    logger.info(f"Sweep finished: {path}")
    return path


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gcd-lab", description="Generalized category discovery laboratory")
    commands = parser.add_subparsers(dest="command", required=True)

    def with_config(sub: argparse.ArgumentParser) -> argparse.ArgumentParser:
        sub.add_argument("--config", help="flat experiment file of key=value (or key: value) lines")
        sub.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                         help="override one experiment key; repeatable")
        return sub

    gen = with_config(commands.add_parser("gen", help="generate a synthetic dataset"))
    gen.add_argument("--out", help="dataset file")

    train_cmd = with_config(commands.add_parser("train", help="train and evaluate a model"))
    train_cmd.add_argument("--dataset", help="dataset file; generated from the config when omitted")
    train_cmd.add_argument("--out", help="run directory")

    eval_cmd = with_config(commands.add_parser("eval", help="evaluate a checkpoint on D^u"))
    eval_cmd.add_argument("--checkpoint", required=True)
    eval_cmd.add_argument("--dataset", required=True)
    eval_cmd.add_argument("--out", help="report directory")

    km = with_config(commands.add_parser("kmeans", help="k-means baseline"))
    km.add_argument("--dataset", required=True)
    km.add_argument("--mode", choices=["plain", "semi"], default="semi")
    km.add_argument("--k", type=int, help="number of clusters; defaults to K_u")
    km.add_argument("--seed", type=int, default=0)
    km.add_argument("--checkpoint", help="cluster this model's classifier-input features")
    km.add_argument("--max-iters", type=int, default=100)
    km.add_argument("--labelled-only-centroids", action="store_true")
    km.add_argument("--out", help="report directory")

    diag = commands.add_parser("diagnose", help="plot tables from reports and metrics logs")
    diag.add_argument("reports", nargs="+", help="report.json files")
    diag.add_argument("--metrics", nargs="*", default=[], help="metrics.jsonl files")
    diag.add_argument("--out", default=".", help="table directory")

    sweep = with_config(commands.add_parser("sweep", help="one run per axis value and seed"))
    sweep.add_argument("--axis", choices=sorted(SWEEP_AXES), required=True)
    sweep.add_argument("--values", nargs="+", type=yaml.safe_load, required=True)
    sweep.add_argument("--seeds", nargs="+", type=int, default=[0])
    sweep.add_argument("--dataset", help="shared dataset file; generated when omitted")
    sweep.add_argument("--workers", type=int, default=1)
    sweep.add_argument("--out", help="sweep directory")
    return parser


def dispatch(args: argparse.Namespace) -> None:
    if args.command == "gen":
        cmd_gen(args.config, args.out, args.overrides)
    elif args.command == "train":
        cmd_train(args.config, args.dataset, args.out, args.overrides)
    elif args.command == "eval":
        cmd_eval(args.checkpoint, args.dataset, args.out, args.config, args.overrides)
    elif args.command == "kmeans":
        cmd_kmeans(args.dataset, args.mode, args.k, args.seed, args.out, args.checkpoint,
                   args.max_iters, args.labelled_only_centroids, args.config, args.overrides)
    elif args.command == "diagnose":
        cmd_diagnose(args.reports, args.out, args.metrics)
    elif args.command == "sweep":
        cmd_sweep(args.config, args.axis, args.values, args.seeds, args.out, args.dataset,
                  args.workers, args.overrides)


def exit_code(error: BaseException) -> Tuple[str, int]:
    """(kind, exit code) for an error reaching the entry point."""
    for error_type, code in EXIT_CODES:
        if isinstance(error, error_type):
            kind = error.kind if isinstance(error, GcdError) else "io_error"
            return kind, code
    return "internal", 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        dispatch(args)
    except Exception as e:
        kind, code = exit_code(e)
        if kind == "internal":
            logger.exception(f"Unexpected error in '{args.command}': {e}")
        else:
            logger.error(f"'{args.command}' failed: {e}")
        reason = " ".join(str(e).split())
        print(f"error={kind} exit={code} reason={reason}", file=sys.stderr)
        return code
    return 0
