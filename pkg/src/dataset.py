import math
import struct
from pathlib import Path
from typing import FrozenSet, List, Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from logs.logger import logger
from src.exceptions import InvariantViolationError, MalformedFileError
from src.models import GenConfig, OldClassSelection


DATASET_MAGIC = b"GCDS"
DATASET_VERSION = 1


class GcdDataset(BaseModel):
    """
    Partially labelled feature matrix.

    Labelled rows (D^l) only come from old classes; every class keeps at
    least one unlabelled row, so D^u covers all of them. Immutable.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    features: np.ndarray
    labels: np.ndarray
    labelled_mask: np.ndarray
    old_classes: FrozenSet[int]
    num_classes: int

    @field_validator("features", mode="before")
    @classmethod
    def _as_float_matrix(cls, value: np.ndarray) -> np.ndarray:
        value = np.array(value, dtype=np.float64, copy=True)
        if value.ndim != 2:
            raise InvariantViolationError(f"features must be 2-D, got shape {value.shape}")
        if not np.all(np.isfinite(value)):
            raise InvariantViolationError("features contain non-finite values")
        value.setflags(write=False)
        return value

    @field_validator("labels", mode="before")
    @classmethod
    def _as_label_vector(cls, value: np.ndarray) -> np.ndarray:
        value = np.array(value, dtype=np.int64, copy=True)
        value.setflags(write=False)
        return value

    @field_validator("labelled_mask", mode="before")
    @classmethod
    def _as_mask(cls, value: np.ndarray) -> np.ndarray:
        value = np.array(value, dtype=bool, copy=True)
        value.setflags(write=False)
        return value

    @model_validator(mode="after")
    def _check_invariants(self) -> "GcdDataset":
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.labelled_mask.shape != (n,):
            raise InvariantViolationError(
                f"labels {self.labels.shape} / mask {self.labelled_mask.shape} do not match {n} rows")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InvariantViolationError(f"class ids must lie in [0, {self.num_classes})")
        if not self.old_classes:
            raise InvariantViolationError("old class set is empty")
        if any(c < 0 or c >= self.num_classes for c in self.old_classes):
            raise InvariantViolationError(f"old classes {sorted(self.old_classes)} outside [0, {self.num_classes})")
        labelled_classes = set(np.unique(self.labels[self.labelled_mask]).tolist())
        stray = labelled_classes - set(self.old_classes)
        if stray:
            raise InvariantViolationError(f"labelled rows with classes outside the old set: {sorted(stray)}")
        present = np.unique(self.labels)
        unlabelled_present = set(np.unique(self.labels[~self.labelled_mask]).tolist())
        missing = [int(c) for c in present if int(c) not in unlabelled_present]
        if missing:
            raise InvariantViolationError(f"classes without unlabelled rows: {missing}")
        return self

    @property
    def num_samples(self) -> int:
        return int(self.features.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def new_classes(self) -> FrozenSet[int]:
        return frozenset(range(self.num_classes)) - self.old_classes

    @property
    def unlabelled_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.labelled_mask)

    @property
    def labelled_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labelled_mask)

    def class_to_prototype(self) -> np.ndarray:
        """
        Maps class ids to prototype indices: old classes first, then new ones,
        each group in ascending id order.
        """
        order = sorted(self.old_classes) + sorted(self.new_classes)
        mapping = np.empty(self.num_classes, dtype=np.int64)
        mapping[np.asarray(order, dtype=np.int64)] = np.arange(self.num_classes)
        return mapping

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GcdDataset):
            return NotImplemented
        return (self.num_classes == other.num_classes
                and self.old_classes == other.old_classes
                and self.features.shape == other.features.shape
                and self.features.tobytes() == other.features.tobytes()
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.labelled_mask, other.labelled_mask))

    __hash__ = None


class ViewPair(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    view_a: np.ndarray
    view_b: np.ndarray


def class_sizes(cfg: GenConfig) -> List[int]:
    """Samples per class; long-tail mode gives rank r (1-based) n * r^-gamma samples."""
    if cfg.long_tail_exponent == 0.0:
        return [cfg.samples_per_class] * cfg.num_classes
    return [max(2, int(round(cfg.samples_per_class * (rank ** -cfg.long_tail_exponent))))
            for rank in range(1, cfg.num_classes + 1)]


def generate(cfg: GenConfig) -> GcdDataset:
    """
    Draws a Gaussian-mixture GCD instance.

    Args:
        cfg: Generation parameters.

    Returns:
        A dataset where the first ceil(K_u * old_class_fraction) classes of a
        seeded shuffle (or of the index order) are old, and a fraction of
        each old class is labelled, never less than one row nor all of them.

    Raises:
        InvariantViolationError: If old_class_fraction leaves no old class.
    """
    rng = np.random.default_rng(cfg.seed)
    k = cfg.num_classes

    directions = rng.standard_normal((k, cfg.feature_dim))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    means = cfg.class_radius * directions / norms

    num_old = math.ceil(k * cfg.old_class_fraction)
    if num_old == 0:
        raise InvariantViolationError("old_class_fraction yields zero old classes")
    order = rng.permutation(k)
    if cfg.old_class_selection == OldClassSelection.INDEX:
        old = frozenset(range(num_old))
    else:
        old = frozenset(int(c) for c in order[:num_old])

    sizes = class_sizes(cfg)
    features, labels, mask = [], [], []
    for c in range(k):
        n_c = sizes[c]
        features.append(means[c] + cfg.class_std * rng.standard_normal((n_c, cfg.feature_dim)))
        labels.append(np.full(n_c, c, dtype=np.int64))
        flags = np.zeros(n_c, dtype=bool)
        if c in old:
            n_lab = min(max(int(n_c * cfg.labelled_image_fraction), 1), n_c - 1)
            flags[rng.permutation(n_c)[:n_lab]] = True
        mask.append(flags)

    features_all = np.concatenate(features)
    labels_all = np.concatenate(labels)
    mask_all = np.concatenate(mask)

    shuffle = rng.permutation(len(labels_all))
    dataset = GcdDataset(features=features_all[shuffle], labels=labels_all[shuffle],
                         labelled_mask=mask_all[shuffle], old_classes=old, num_classes=k)
    logger.info(f"Generated dataset: N={dataset.num_samples}, D={dataset.feature_dim}, "
                f"K_u={k}, old={sorted(old)}, labelled={int(mask_all.sum())}")
    return dataset


def augment(batch: np.ndarray, noise_std: float, mask_fraction: float,
            seed: Union[int, np.random.SeedSequence]) -> ViewPair:
    """
    Two independent random views of a batch.

    Each view adds iid Gaussian noise and zeroes exactly
    floor(mask_fraction * D) coordinates per sample.
    """
    if noise_std < 0:
        raise ValueError(f"noise_std must be >= 0, got {noise_std}")
    if not 0.0 <= mask_fraction < 1.0:
        raise ValueError(f"mask_fraction must be in [0, 1), got {mask_fraction}")
    batch = np.asarray(batch, dtype=np.float64)
    rng = np.random.default_rng(seed)
    rows, dim = batch.shape
    num_masked = int(mask_fraction * dim)

    def one_view() -> np.ndarray:
        view = batch + rng.normal(0.0, noise_std, size=batch.shape) if noise_std > 0 else batch.copy()
        if num_masked:
            masked = np.argsort(rng.random((rows, dim)), axis=1)[:, :num_masked]
            view[np.arange(rows)[:, None], masked] = 0.0
        return view

    view_a = one_view()
    view_b = one_view()
    return ViewPair(view_a=view_a, view_b=view_b)


# ---------------------------------------------------------------------------
# binary file format


def save(ds: GcdDataset, path: Union[str, Path]) -> Path:
    """
    Writes the dataset in the GCDS binary layout (little-endian).

    Args:
        ds: Dataset to write.
        path: Destination file.

    Returns:
        The written path.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    old = sorted(ds.old_classes)
    n, d = ds.features.shape
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", DATASET_VERSION))
        f.write(struct.pack("<4Q", n, d, ds.num_classes, len(old)))
        f.write(np.asarray(old, dtype="<u8").tobytes())
        f.write(ds.labels.astype("<u8").tobytes())
        f.write(ds.labelled_mask.astype(np.uint8).tobytes())
        f.write(ds.features.astype("<f8").tobytes())
    logger.info(f"Dataset saved to '{path}' ({n} rows)")
    return path


class _Reader:
    """Sequential reader over a byte buffer that reports offsets on failure."""

    def __init__(self, buffer: bytes) -> None:
        self.buffer = buffer
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.buffer):
            raise MalformedFileError(f"truncated file while reading {what}", self.offset)
        chunk = self.buffer[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def array(self, count: int, dtype: str, what: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(count * itemsize, what), dtype=dtype)


def load(path: Union[str, Path]) -> GcdDataset:
    """
    Reads a GCDS file.

    Raises:
        MalformedFileError: Bad magic, unknown version, truncation or trailing bytes.
        InvariantViolationError: The decoded dataset breaks a dataset invariant.
    """
    path = Path(path)
    reader = _Reader(path.read_bytes())
    magic = reader.take(4, "magic")
    if magic != DATASET_MAGIC:
        raise MalformedFileError(f"bad magic {magic!r}, expected {DATASET_MAGIC!r}", 0)
    (version,) = struct.unpack("<I", reader.take(4, "version"))
    if version != DATASET_VERSION:
        raise MalformedFileError(f"unsupported version {version}", 4)
    n, d, k, num_old = struct.unpack("<4Q", reader.take(32, "header"))
    old = reader.array(num_old, "<u8", "old class ids")
    labels = reader.array(n, "<u8", "labels")
    mask = reader.array(n, "u1", "labelled mask")
    if np.any(mask > 1):
        raise MalformedFileError("labelled mask holds values other than 0/1", reader.offset - n)
    features = reader.array(n * d, "<f8", "features").reshape(n, d)
    if reader.offset != len(reader.buffer):
        raise MalformedFileError(f"{len(reader.buffer) - reader.offset} trailing bytes", reader.offset)

    return GcdDataset(features=features.astype(np.float64), labels=labels.astype(np.int64),
                      labelled_mask=mask.astype(bool), old_classes=frozenset(int(c) for c in old),
                      num_classes=int(k))


def ingest_features(path: Union[str, Path], num_classes: Optional[int] = None) -> GcdDataset:
    """
    Builds a dataset from an external CSV of embeddings.

    Layout: header `label,labelled,f0..f{D-1}`, one row per sample. Old
    classes are the classes of labelled rows.

    Args:
        path: CSV file.
        num_classes: K_u; defaults to max(label) + 1.

    Raises:
        MalformedFileError: Header or row arity mismatch, non-numeric cells,
            or no data rows.
        InvariantViolationError: Labelled rows with a class id outside [0, K_u).
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, header=0, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as e:
        raise MalformedFileError(f"row arity mismatch in '{path}': {e}") from e

    columns = list(frame.columns)
    expected = ["label", "labelled"] + [f"f{i}" for i in range(len(columns) - 2)]
    if len(columns) < 3 or columns != expected:
        raise MalformedFileError(f"header {columns} does not match label,labelled,f0..f{{D-1}}")
    if frame.empty:
        raise MalformedFileError(f"no data rows in '{path}'")
    blank = (frame.isna() | (frame == "")).to_numpy()
    if blank.any():
        line = int(np.flatnonzero(blank.any(axis=1))[0]) + 2
        raise MalformedFileError(f"row arity mismatch at line {line}")

    try:
        labels = frame["label"].astype(np.int64).to_numpy()
        labelled = frame["labelled"].astype(np.int64).to_numpy().astype(bool)
        features = frame[expected[2:]].astype(np.float64).to_numpy()
    except ValueError as e:
        raise MalformedFileError(f"non-numeric cell in '{path}': {e}") from e

    k = num_classes if num_classes is not None else int(labels.max()) + 1
    unknown = labels[labelled & ((labels < 0) | (labels >= k))]
    if unknown.size:
        raise InvariantViolationError(f"unknown class id {int(unknown[0])} in labelled row")
    old = frozenset(int(c) for c in np.unique(labels[labelled]))
    logger.info(f"Ingested {len(labels)} rows with D={features.shape[1]} from '{path}'")
    return GcdDataset(features=features, labels=labels, labelled_mask=labelled,
                      old_classes=old, num_classes=k)
