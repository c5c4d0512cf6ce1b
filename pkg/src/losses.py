"""
Objective terms as ComputeGraph constructors.

Every builder appends nodes to a caller-owned graph and returns node ids;
nothing is evaluated until `forward`. Targets that carry no gradient
(contrastive identities, pseudo-labels) enter the graph as constants.
"""
from dataclasses import dataclass, field
from typing import Dict, Iterable, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from logs.logger import logger
from src.dataset import GcdDataset, ViewPair
from src.exceptions import BatchTooSmallError, NonStochasticError, NoPositivesError
from src.models import LossBreakdown, TrainConfig, TrainingMode
from src.network import PROTOTYPES, GcdModel, soft_assign
from src.numgraph import ComputeGraph
from src.pseudolabel import PseudoLabels, ground_truth_targets, make_provider


STOCHASTIC_TOLERANCE = 1e-9


class RepTerms(NamedTuple):
    unsup: int
    sup: Optional[int]
    total: int


class ClsTerms(NamedTuple):
    ce: Optional[int]
    mean_entropy: int
    total: int


@dataclass
class ObjectiveResult:
    breakdown: LossBreakdown
    graph: ComputeGraph
    loss: int
    leaves: Dict[str, int]
    nodes: Dict[str, Optional[int]] = field(default_factory=dict)


def weighted_sum(graph: ComputeGraph, terms: Iterable[Tuple[float, Optional[int]]]) -> int:
    """sum w * node over the terms whose node exists."""
    total = None
    for weight, node in terms:
        if node is None:
            continue
        scaled = graph.scale(node, weight)
        total = scaled if total is None else graph.add(total, scaled)
    if total is None:
        raise ValueError("weighted_sum needs at least one term")
    return total


def _check_stochastic(targets: np.ndarray, what: str) -> None:
    sums = targets.sum(axis=1)
    if targets.size and (np.any(targets < 0) or np.any(np.abs(sums - 1.0) > STOCHASTIC_TOLERANCE)):
        row = int(np.argmax(np.abs(sums - 1.0)))
        raise NonStochasticError(f"{what}: row {row} sums to {sums[row]!r}")


def _info_nce(graph: ComputeGraph, probs: int, targets: np.ndarray, exclude_positive: bool) -> int:
    """
    Soft cross-entropy against a constant target; with `exclude_positive`
    each positive's own term also leaves the denominator, which adds
    log(1 - P_iq) to every -log P_iq.
    """
    target = graph.constant(targets)
    loss = graph.soft_cross_entropy(probs, target)
    if not exclude_positive:
        return loss
    complement = graph.add(graph.negate(probs), graph.constant(np.ones(targets.shape)))
    return graph.add(loss, graph.negate(graph.soft_cross_entropy(complement, target)))


def unsup_contrastive(graph: ComputeGraph, z: int, z_prime: int, batch_size: int,
                      tau_u: float, exclude_positive: bool = False) -> int:
    """
    InfoNCE across two views: anchor z_i, positive z'_i, every z'_n in the
    denominator.

    Raises:
        BatchTooSmallError: Fewer than 2 rows.
    """
    if batch_size < 2:
        raise BatchTooSmallError(f"contrastive loss needs at least 2 rows, got {batch_size}")
    probs = graph.row_softmax(graph.matmul(z, z_prime, transpose_b=True), tau_u)
    return _info_nce(graph, probs, np.eye(batch_size), exclude_positive)


def sup_contrastive(graph: ComputeGraph, z: int, z_prime: int, labels: Sequence[int],
                    tau_c: float, exclude_positive: bool = False) -> int:
    """
    Supervised contrastive loss over labelled rows.

    `z` and `z_prime` hold only the labelled rows, `labels` their classes.
    The positives of anchor i are every second-view row with the same label,
    its own second view included, so with all labels distinct this reduces
    to the unsupervised loss at temperature `tau_c`.

    Raises:
        NoPositivesError: No labelled rows.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise NoPositivesError("no labelled rows to anchor the supervised loss")
    same = labels[:, None] == labels[None, :]
    targets = same / same.sum(axis=1, keepdims=True)
    probs = graph.row_softmax(graph.matmul(z, z_prime, transpose_b=True), tau_c)
    return _info_nce(graph, probs, targets, exclude_positive)


def rep_loss(graph: ComputeGraph, z: int, z_prime: int, labels: np.ndarray, labelled_mask: np.ndarray,
             sup_weight: float, tau_u: float, tau_c: float, exclude_positive: bool = False) -> RepTerms:
    """(1 - lambda) * unsup + lambda * sup; fewer than two labelled rows leave out the sup term."""
    labels = np.asarray(labels)
    unsup = unsup_contrastive(graph, z, z_prime, len(labels), tau_u, exclude_positive)
    rows = np.flatnonzero(labelled_mask)
    sup = None
    if rows.size >= 2:
        sup = sup_contrastive(graph, graph.select_rows(z, rows), graph.select_rows(z_prime, rows),
                              labels[rows], tau_c, exclude_positive)
    else:
        logger.debug("Batch with fewer than two labelled rows, supervised contrastive term skipped")
    total = weighted_sum(graph, [(1.0 - sup_weight, unsup), (sup_weight, sup)])
    return RepTerms(unsup=unsup, sup=sup, total=total)


def cls_unsup(graph: ComputeGraph, p: int, p_prime: int, q: np.ndarray, q_prime: np.ndarray,
              entropy_weight: float, rows: Optional[np.ndarray] = None) -> ClsTerms:
    """
    Cross-view soft cross-entropy with the mean-entropy regulariser.

    ce = (CE(p, q') + CE(p', q)) / 2 over the covered `rows` (all rows by
    default); mean_entropy = H(p_bar) with p_bar the mean prediction over
    both views. `total` = ce - entropy_weight * mean_entropy.

    Raises:
        NonStochasticError: A covered target row is not a distribution.
    """
    rows = np.arange(q.shape[0]) if rows is None else np.asarray(rows, dtype=np.int64)
    ce = None
    if rows.size:
        _check_stochastic(q[rows], "targets")
        _check_stochastic(q_prime[rows], "targets_prime")
        ce_a = graph.soft_cross_entropy(graph.select_rows(p, rows), graph.constant(q_prime[rows]))
        ce_b = graph.soft_cross_entropy(graph.select_rows(p_prime, rows), graph.constant(q[rows]))
        ce = graph.scale(graph.add(ce_a, ce_b), 0.5)
    p_bar = graph.scale(graph.add(graph.mean_rows(p), graph.mean_rows(p_prime)), 0.5)
    mean_entropy = graph.entropy(p_bar)
    total = weighted_sum(graph, [(1.0, ce), (-entropy_weight, mean_entropy)])
    return ClsTerms(ce=ce, mean_entropy=mean_entropy, total=total)


def cls_sup(graph: ComputeGraph, p: int, targets: np.ndarray) -> int:
    """Mean cross-entropy of labelled predictions against ground-truth one-hots."""
    _check_stochastic(targets, "labelled targets")
    return graph.soft_cross_entropy(p, graph.constant(targets))


def total_objective(model: GcdModel, views: ViewPair, ds: GcdDataset, indices: np.ndarray,
                    cfg: TrainConfig, tau_t: Optional[float] = None,
                    targets: Optional[PseudoLabels] = None) -> ObjectiveResult:
    """
    Builds and evaluates the full objective for one batch.

    total = (1-l) rep_unsup + l rep_sup + (1-l) (ce - eps H(p_bar)) + l cls_sup

    Args:
        model: Current parameters.
        views: The two augmented views of the batch rows.
        ds: Dataset the batch indexes into.
        indices: Row indices of the batch.
        cfg: Weights, temperatures and toggles.
        tau_t: Teacher temperature (self_distil).
        targets: Precomputed pseudo-labels; computed from `model` when None.

    Returns:
        The loss breakdown plus a graph on which forward already ran.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) < 2:
        raise BatchTooSmallError(f"batch needs at least 2 rows, got {len(indices)}")
    provider = make_provider(cfg.supervision)
    provider.check(ds, model.num_prototypes)
    if targets is None:
        targets = provider.provide(model, ds, indices, views, tau_t)
    labels = ds.labels[indices]
    labelled = ds.labelled_mask[indices]
    lam = cfg.sup_weight

    graph = ComputeGraph()
    leaves = model.register(graph)
    h_a = model.backbone_forward(graph, leaves, graph.constant(views.view_a))
    h_b = model.backbone_forward(graph, leaves, graph.constant(views.view_b))
    z_a = model.projector_forward(graph, leaves, h_a)
    z_b = model.projector_forward(graph, leaves, h_b)
    rep = rep_loss(graph, z_a, z_b, labels, labelled, lam, cfg.tau_u, cfg.tau_c, cfg.exclude_positive)

    f_a = model.classifier_features(graph, h_a, z_a)
    f_b = model.classifier_features(graph, h_b, z_b)
    if cfg.training is TrainingMode.DECOUPLED:
        f_a, f_b = graph.stop_gradient(f_a), graph.stop_gradient(f_b)
    p_a = soft_assign(graph, f_a, leaves[PROTOTYPES], cfg.tau_s)
    p_b = soft_assign(graph, f_b, leaves[PROTOTYPES], cfg.tau_s)
    cls = cls_unsup(graph, p_a, p_b, targets.targets, targets.targets_prime,
                    cfg.entropy_weight, rows=targets.covered_rows)

    rows = np.flatnonzero(labelled)
    sup_cls = None
    if rows.size:
        onehot = ground_truth_targets(ds, indices[rows], model.num_prototypes)
        sup_cls = graph.scale(graph.add(cls_sup(graph, graph.select_rows(p_a, rows), onehot),
                                        cls_sup(graph, graph.select_rows(p_b, rows), onehot)), 0.5)

    loss = weighted_sum(graph, [(1.0 - lam, rep.unsup), (lam, rep.sup),
                                (1.0 - lam, cls.total), (lam, sup_cls)])
    graph.forward(model.params, output=loss)

    def value(node: Optional[int]) -> float:
        return graph.scalar(node) if node is not None else 0.0

    breakdown = LossBreakdown(rep_unsup=value(rep.unsup), rep_sup=value(rep.sup),
                              cls_unsup_ce=value(cls.ce), mean_entropy=value(cls.mean_entropy),
                              cls_sup=value(sup_cls), total=value(loss))
    nodes = {"h_a": h_a, "h_b": h_b, "z_a": z_a, "z_b": z_b, "p_a": p_a, "p_b": p_b,
             "rep_unsup": rep.unsup, "rep_sup": rep.sup, "cls_unsup_ce": cls.ce,
             "mean_entropy": cls.mean_entropy, "cls_sup": sup_cls}
    return ObjectiveResult(breakdown=breakdown, graph=graph, loss=loss, leaves=leaves, nodes=nodes)
