from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import adjusted_rand_score, normalized_mutual_info_score

from logs.logger import logger
from src.exceptions import EmptyEvaluationError
from src.models import AccReport, ErrorTaxonomy, EvaluationReport, PredHistogram


KL_SMOOTHING = 1e-9


def hungarian(cost: np.ndarray) -> Tuple[Dict[int, int], float]:
    """
    Minimum-cost perfect matching of a square cost matrix.

    Args:
        cost: n x n matrix of finite costs.

    Returns:
        (row -> column assignment, total cost).

    Raises:
        ValueError: If the matrix is not square or holds non-finite costs.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"hungarian needs a square cost matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("hungarian needs finite costs")
    rows, cols = linear_sum_assignment(cost)
    return {int(r): int(c) for r, c in zip(rows, cols)}, float(cost[rows, cols].sum())


def _validate(y_true: np.ndarray, y_pred: np.ndarray, k_pred: int) -> Tuple[np.ndarray, np.ndarray]:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise EmptyEvaluationError("evaluation set is empty")
    if y_true.shape != y_pred.shape:
        raise ValueError(f"y_true {y_true.shape} and y_pred {y_pred.shape} differ")
    if y_pred.min() < 0 or y_pred.max() >= k_pred:
        raise ValueError(f"predicted ids must lie in [0, {k_pred})")
    if y_true.min() < 0:
        raise ValueError("class ids must be >= 0")
    return y_true, y_pred


def match_predictions(y_true: np.ndarray, y_pred: np.ndarray, size: int) -> np.ndarray:
    """
    Optimal predicted-id -> class-id map over a zero-padded size x size
    contingency table. Entry i of the result is the class matched to id i.
    """
    counts = np.zeros((size, size), dtype=np.int64)
    np.add.at(counts, (y_pred, y_true), 1)
    assignment, _ = hungarian(-counts)
    return np.array([assignment[i] for i in range(size)], dtype=np.int64)


def _split_accuracy(y_true: np.ndarray, y_pred: np.ndarray, size: int) -> float:
    if y_true.size == 0:
        return 0.0
    perm = match_predictions(y_true, y_pred, size)
    return float(np.mean(perm[y_pred] == y_true))


def cluster_acc(y_true: Sequence[int], y_pred: Sequence[int], old_classes: Iterable[int],
                k_pred: int, num_classes: Optional[int] = None,
                rematch_splits: bool = False) -> AccReport:
    """
    Hungarian-matched clustering accuracy on All, Old and New.

    One global permutation is computed on all samples and reused to score
    the Old slice (true class in `old_classes`) and the New slice. With
    `rematch_splits`, acc_old and acc_new are instead re-matched on their
    own slice; acc_all and the split counts keep the global matching.

    Args:
        y_true: Ground-truth classes of the evaluation samples.
        y_pred: Predicted ids in [0, k_pred).
        old_classes: Y_l.
        k_pred: Number of predicted ids (prototypes or clusters).
        num_classes: K_u; defaults to max(y_true) + 1.
        rematch_splits: Score Old/New with their own matching.

    Raises:
        EmptyEvaluationError: If there is nothing to score.
    """
    y_true, y_pred = _validate(y_true, y_pred, k_pred)
    k_u = num_classes if num_classes is not None else int(y_true.max()) + 1
    size = max(k_pred, k_u, int(y_true.max()) + 1)
    perm = match_predictions(y_true, y_pred, size)
    correct = perm[y_pred] == y_true

    old_mask = np.isin(y_true, np.fromiter(old_classes, dtype=np.int64))
    num_old = int(old_mask.sum())
    num_new = int(y_true.size - num_old)
    correct_old = int(correct[old_mask].sum())
    correct_new = int(correct[~old_mask].sum())

    if rematch_splits:
        acc_old = _split_accuracy(y_true[old_mask], y_pred[old_mask], size)
        acc_new = _split_accuracy(y_true[~old_mask], y_pred[~old_mask], size)
    else:
        acc_old = correct_old / num_old if num_old else 0.0
        acc_new = correct_new / num_new if num_new else 0.0

    used = np.unique(y_pred)
    return AccReport(acc_all=(correct_old + correct_new) / y_true.size,
                     acc_old=acc_old, acc_new=acc_new,
                     permutation={int(p): int(perm[p]) for p in used},
                     num_samples=int(y_true.size), num_old=num_old, num_new=num_new,
                     correct_old=correct_old, correct_new=correct_new,
                     nmi=float(normalized_mutual_info_score(y_true, y_pred)),
                     ari=float(adjusted_rand_score(y_true, y_pred)))


def matched_labels(y_pred: Sequence[int], permutation: Dict[int, int]) -> np.ndarray:
    return np.array([permutation[int(p)] for p in y_pred], dtype=np.int64)


def error_taxonomy(y_true: Sequence[int], matched_pred: Sequence[int],
                   old_classes: Iterable[int]) -> ErrorTaxonomy:
    """
    Error mass of the zero-diagonal confusion matrix, split at the Old/New boundary.

    Matched ids outside the class range (padding) count as New predictions.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    matched_pred = np.asarray(matched_pred, dtype=np.int64)
    if y_true.size == 0:
        raise EmptyEvaluationError("evaluation set is empty")
    old = np.fromiter(old_classes, dtype=np.int64)
    wrong = matched_pred != y_true
    true_old = np.isin(y_true, old)
    pred_old = np.isin(matched_pred, old)
    total = float(y_true.size)
    return ErrorTaxonomy(true_old=float(np.sum(wrong & true_old & pred_old)) / total,
                         false_new=float(np.sum(wrong & true_old & ~pred_old)) / total,
                         false_old=float(np.sum(wrong & ~true_old & pred_old)) / total,
                         true_new=float(np.sum(wrong & ~true_old & ~pred_old)) / total)


def active_prototypes(y_pred: Sequence[int], k_pred: int, min_count: int = 1) -> int:
    """Number of ids predicted for at least `min_count` samples."""
    counts = np.bincount(np.asarray(y_pred, dtype=np.int64), minlength=k_pred)
    return int(np.sum(counts >= min_count))


def pred_histogram(y_true: Sequence[int], matched_pred: Sequence[int], size: int) -> PredHistogram:
    """Per-class counts of matched predictions and of ground truth, both of length `size`."""
    predicted = np.bincount(np.asarray(matched_pred, dtype=np.int64), minlength=size)
    truth = np.bincount(np.asarray(y_true, dtype=np.int64), minlength=size)
    return PredHistogram(predicted_counts=predicted.tolist(), true_counts=truth.tolist())


def marginal_kl(pred_counts: Sequence[float], true_counts: Sequence[float],
                smoothing: float = KL_SMOOTHING) -> float:
    """KL(prediction marginal || ground-truth marginal) after additive smoothing."""
    size = max(len(pred_counts), len(true_counts))
    p = np.zeros(size)
    q = np.zeros(size)
    p[:len(pred_counts)] = pred_counts
    q[:len(true_counts)] = true_counts
    p = (p + smoothing) / (p + smoothing).sum()
    q = (q + smoothing) / (q + smoothing).sum()
    return float(np.sum(p * np.log(p / q)))


def evaluate(y_true: Sequence[int], y_pred: Sequence[int], old_classes: Iterable[int], k_pred: int,
             num_classes: Optional[int] = None, rematch_splits: bool = False,
             active_min_count: int = 1) -> EvaluationReport:
    """Full report for one set of predictions over D^u."""
    old_classes = frozenset(int(c) for c in old_classes)
    acc = cluster_acc(y_true, y_pred, old_classes, k_pred, num_classes, rematch_splits)
    matched = matched_labels(y_pred, acc.permutation)
    y_true = np.asarray(y_true, dtype=np.int64)
    size = max(k_pred, num_classes or 0, int(y_true.max()) + 1)
    histogram = pred_histogram(y_true, matched, size)
    report = EvaluationReport(acc=acc,
                              taxonomy=error_taxonomy(y_true, matched, old_classes),
                              histogram=histogram,
                              active_prototypes=active_prototypes(y_pred, k_pred, active_min_count),
                              num_prototypes=k_pred,
                              marginal_kl=marginal_kl(histogram.predicted_counts, histogram.true_counts))
    logger.debug(f"ACC all={acc.acc_all:.4f} old={acc.acc_old:.4f} new={acc.acc_new:.4f}")
    return report
