from typing import Iterable, Optional, Union

import numpy as np
from scipy.spatial.distance import cdist

from logs.logger import logger
from src.dataset import GcdDataset
from src.exceptions import InvalidConfigError, InvariantViolationError
from src.models import KmeansResult


FREE = -1


def kmeanspp_init(points: np.ndarray, k: int, seed: Union[int, np.random.SeedSequence],
                  existing: Optional[np.ndarray] = None) -> np.ndarray:
    """
    k-means++ seeding by D^2 sampling.

    Args:
        points: N x d candidates.
        k: Number of new centroids.
        seed: RNG seed.
        existing: Centroids already placed; new seeds are drawn with
            probability proportional to the squared distance to the nearest
            of them as well.

    Returns:
        k x d centroids, each one of the points.

    Raises:
        InvalidConfigError: If k > N or k < 1.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k < 1 or k > n:
        raise InvalidConfigError(f"k-means++ needs 1 <= k <= N, got k={k}, N={n}")
    rng = np.random.default_rng(seed)
    chosen = np.empty((k, points.shape[1]))

    if existing is not None and len(existing):
        nearest = cdist(points, np.asarray(existing, dtype=np.float64), "sqeuclidean").min(axis=1)
        start = 0
    else:
        chosen[0] = points[rng.integers(n)]
        nearest = cdist(points, chosen[:1], "sqeuclidean")[:, 0]
        start = 1

    for i in range(start, k):
        total = nearest.sum()
        index = rng.choice(n, p=nearest / total) if total > 0 else int(rng.integers(n))
        chosen[i] = points[index]
        nearest = np.minimum(nearest, cdist(points, chosen[i:i + 1], "sqeuclidean")[:, 0])
    return chosen


def _assign(points: np.ndarray, centroids: np.ndarray, fixed: Optional[np.ndarray]) -> np.ndarray:
    # argmin keeps the first minimum: ties go to the lowest cluster index
    assignments = np.argmin(cdist(points, centroids, "sqeuclidean"), axis=1)
    if fixed is not None:
        pinned = fixed != FREE
        assignments[pinned] = fixed[pinned]
    return assignments


def within_cluster_ss(points: np.ndarray, centroids: np.ndarray, assignments: np.ndarray) -> float:
    """
    k-means objective sum_i ||x_i - c_{a_i}||^2.

    Args:
        points: N x d data.
        centroids: K x d centroids.
        assignments: Cluster index per point.

    Returns:
        The summed squared distances.
    """
    return float(np.sum((points - centroids[assignments]) ** 2))


def _update(points: np.ndarray, centroids: np.ndarray, assignments: np.ndarray,
            fixed: Optional[np.ndarray], frozen: Optional[np.ndarray]) -> np.ndarray:
    k = centroids.shape[0]
    updated = centroids.copy()
    counts = np.bincount(assignments, minlength=k)
    for j in np.flatnonzero(counts):
        updated[j] = points[assignments == j].mean(axis=0)
    if frozen is not None:
        updated[: len(frozen)] = frozen

    empty = np.flatnonzero(counts == 0)
    if empty.size:
        distance = np.sum((points - centroids[assignments]) ** 2, axis=1)
        if fixed is not None:
            distance[fixed != FREE] = -np.inf
        for j, index in zip(empty, np.argsort(-distance, kind="stable")):
            updated[j] = points[index]
        logger.warning(f"Re-seeded {empty.size} empty clusters at the farthest points")
    return updated


def kmeans(points: np.ndarray, init_centroids: np.ndarray, max_iters: int = 100, tol: float = 1e-8,
           fixed: Optional[np.ndarray] = None, frozen: Optional[np.ndarray] = None,
           record_history: bool = False) -> KmeansResult:
    """
    Lloyd iterations from given centroids.

    Stops at an assignment fixpoint, when no centroid moves more than `tol`,
    or after `max_iters`. The returned centroids are the ones the returned
    assignments were computed against.

    Args:
        points: N x d data.
        init_centroids: K x d starting centroids.
        max_iters: Iteration cap, >= 1.
        tol: Centroid shift threshold.
        fixed: Optional per-point cluster index; entries other than -1 are
            pinned to that cluster at every iteration.
        frozen: Optional centroids for the first clusters that never move.
        record_history: Keep every iteration's assignments.

    Returns:
        Final centroids and assignments with the objective per iteration.

    Raises:
        InvalidConfigError: If max_iters < 1.
    """
    if max_iters < 1:
        raise InvalidConfigError(f"max_iters must be >= 1, got {max_iters}")
    points = np.asarray(points, dtype=np.float64)
    centroids = np.array(init_centroids, dtype=np.float64)
    objectives, assignment_history = [], []
    previous = None
    iterations = 0

    for iterations in range(1, max_iters + 1):
        assignments = _assign(points, centroids, fixed)
        objectives.append(within_cluster_ss(points, centroids, assignments))
        if record_history:
            assignment_history.append(assignments.copy())
        if previous is not None and np.array_equal(assignments, previous):
            break
        updated = _update(points, centroids, assignments, fixed, frozen)
        shift = float(np.max(np.linalg.norm(updated - centroids, axis=1)))
        if shift < tol:
            break
        if iterations < max_iters:
            centroids = updated
        previous = assignments

    return KmeansResult(centroids=centroids, assignments=assignments, objective=objectives[-1],
                        iterations_run=iterations, objective_history=objectives,
                        assignment_history=assignment_history)


def ss_kmeans_arrays(features: np.ndarray, labels: np.ndarray, labelled_mask: np.ndarray,
                     old_classes: Iterable[int], k: int, seed: Union[int, np.random.SeedSequence],
                     max_iters: int = 100, tol: float = 1e-8, labelled_only_centroids: bool = False,
                     record_history: bool = False) -> KmeansResult:
    """
    Semi-supervised k-means on raw arrays.

    Old classes, sorted, own clusters 0..|Y_l|-1 and their labelled points are
    pinned there. Those clusters start at the labelled class means; the
    remaining clusters are seeded by k-means++ over the unlabelled points,
    conditioned on the old centroids. With `labelled_only_centroids` the old
    centroids stay at the labelled means.

    Raises:
        InvalidConfigError: If k < |Y_l| or too few unlabelled points remain to seed.
        InvariantViolationError: If an old class has no labelled row.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    labelled_mask = np.asarray(labelled_mask, dtype=bool)
    old = sorted(int(c) for c in old_classes)
    if k < len(old):
        raise InvalidConfigError(f"semi-supervised k-means needs K >= |Y_l| = {len(old)}, got {k}")

    fixed = np.full(len(labels), FREE, dtype=np.int64)
    for cluster, cls in enumerate(old):
        fixed[labelled_mask & (labels == cls)] = cluster
    empty = [cls for cluster, cls in enumerate(old) if not np.any(fixed == cluster)]
    if empty:
        raise InvariantViolationError(f"old classes without labelled rows: {empty}")
    old_centroids = np.stack([features[fixed == cluster].mean(axis=0) for cluster in range(len(old))])

    init = old_centroids
    remaining = k - len(old)
    if remaining:
        unlabelled = features[~labelled_mask]
        if len(unlabelled) < remaining:
            raise InvalidConfigError(f"{remaining} new clusters but only {len(unlabelled)} unlabelled points")
        init = np.vstack([old_centroids, kmeanspp_init(unlabelled, remaining, seed, existing=old_centroids)])

    return kmeans(features, init, max_iters, tol, fixed=fixed,
                  frozen=old_centroids if labelled_only_centroids else None,
                  record_history=record_history)


def ss_kmeans(ds: GcdDataset, features: np.ndarray, k: int, seed: Union[int, np.random.SeedSequence],
              max_iters: int = 100, tol: float = 1e-8, labelled_only_centroids: bool = False,
              record_history: bool = False) -> KmeansResult:
    """
    Semi-supervised k-means of `features` with the labels of `ds`.

    Args:
        ds: Dataset providing labels, labelled mask and old classes.
        features: One row per dataset sample, raw inputs or model features.
        k: Number of clusters, at least |Y_l|.
        seed: Seed of the k-means++ draw for the new clusters.

    Returns:
        The clustering; labelled rows sit in clusters 0..|Y_l|-1.

    Raises:
        InvalidConfigError: If the row count does not match `ds`.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] != ds.num_samples:
        raise InvalidConfigError(f"{features.shape[0]} feature rows for {ds.num_samples} samples")
    result = ss_kmeans_arrays(features, ds.labels, ds.labelled_mask, ds.old_classes, k, seed,
                              max_iters, tol, labelled_only_centroids, record_history)
    logger.info(f"Semi-supervised k-means: K={k}, {result.iterations_run} iterations, "
                f"objective={result.objective:.4f}")
    return result
