from abc import ABC, abstractmethod
from typing import Dict, Optional, Type

import numpy as np
import ot
from pydantic import BaseModel, ConfigDict

from logs.logger import logger
from src.dataset import GcdDataset, ViewPair
from src.exceptions import SupervisionModeError
from src.models import SupervisionKind, SupervisionMode
from src.network import GcdModel


SINKHORN_TOLERANCE = 1e-3


class PseudoLabels(BaseModel):
    """
    Classification targets for one batch.

    `targets` is derived from view a (q) and supervises the student on view
    b; `targets_prime` is derived from view b (q') and supervises view a.
    Rows outside `coverage_mask` are all zero.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    targets: np.ndarray
    targets_prime: np.ndarray
    coverage_mask: np.ndarray

    @property
    def covered_rows(self) -> np.ndarray:
        return np.flatnonzero(self.coverage_mask)


def sinkhorn_plan(logits: np.ndarray, n_iters: int, reg: float) -> np.ndarray:
    """
    Transport plan Q proportional to exp(logits / reg), scaled so that every
    column (class) sums to 1/K and every row (sample) to about 1/B.

    The scaling runs through POT's Sinkhorn-Knopp solver with classes as the
    source marginal; its last half-step fixes the source side, so column
    marginals are exact after any number of iterations.
    """
    if n_iters < 1:
        raise SupervisionModeError(f"sinkhorn_iters must be >= 1, got {n_iters}")
    if reg <= 0:
        raise SupervisionModeError(f"sinkhorn_reg must be > 0, got {reg}")
    logits = np.asarray(logits, dtype=np.float64)
    rows, classes = logits.shape
    cost = -(logits - logits.max()).T
    plan = ot.sinkhorn(np.full(classes, 1.0 / classes), np.full(rows, 1.0 / rows), cost, reg,
                       numItermax=n_iters, stopThr=0.0, warn=False)
    plan = np.asarray(plan, dtype=np.float64).T
    return plan


def sinkhorn_knopp(logits: np.ndarray, n_iters: int = 3, reg: float = 0.05) -> np.ndarray:
    """
    Equal-partition soft assignment of a batch to K classes.

    Args:
        logits: B x K scores.
        n_iters: Sinkhorn iterations, >= 1.
        reg: Entropic regularisation, > 0.

    Returns:
        Row-stochastic B x K matrix: the transport plan renormalised per row.
    """
    plan = sinkhorn_plan(logits, n_iters, reg)
    row_error = float(np.max(np.abs(plan.sum(axis=1) * plan.shape[0] - 1.0)))
    if row_error > SINKHORN_TOLERANCE:
        logger.warning(f"Sinkhorn did not converge: row marginal error {row_error:.2e} "
                       f"after {n_iters} iterations")
    return plan / plan.sum(axis=1, keepdims=True)


def one_hot(indices: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((len(indices), width))
    out[np.arange(len(indices)), indices] = 1.0
    return out


class TargetProvider(ABC):
    """Base class of the supervision settings."""

    kind: SupervisionKind

    def __init__(self, mode: SupervisionMode) -> None:
        self.mode = mode

    @abstractmethod
    def view_targets(self, model: GcdModel, ds: GcdDataset, indices: np.ndarray,
                     view: np.ndarray, tau_t: Optional[float]) -> Optional[np.ndarray]:
        """Targets for every row of the batch computed from one view; None leaves unlabelled rows uncovered."""
        pass

    @property
    def name(self) -> str:
        return self.kind.value

    def min_prototypes(self, ds: GcdDataset) -> int:
        return len(ds.old_classes)

    def check(self, ds: GcdDataset, num_prototypes: int) -> None:
        required = self.min_prototypes(ds)
        if num_prototypes < required:
            logger.error(f"{self.name}: {num_prototypes} prototypes < {required}")
            raise SupervisionModeError(
                f"{self.name} supervision needs at least {required} prototypes, model has {num_prototypes}")

    def coverage(self, labelled: np.ndarray) -> np.ndarray:
        return np.ones(labelled.shape, dtype=bool)

    def provide(self, model: GcdModel, ds: GcdDataset, indices: np.ndarray,
                views: ViewPair, tau_t: Optional[float] = None) -> PseudoLabels:
        indices = np.asarray(indices, dtype=np.int64)
        k = model.num_prototypes
        self.check(ds, k)
        labelled = ds.labelled_mask[indices]
        truth = ground_truth_targets(ds, indices[labelled], k)

        targets = []
        for view in (views.view_a, views.view_b):
            soft = self.view_targets(model, ds, indices, view, tau_t)
            soft = np.zeros((len(indices), k)) if soft is None else np.array(soft, dtype=np.float64)
            soft[labelled] = truth
            targets.append(soft)
        return PseudoLabels(targets=targets[0], targets_prime=targets[1],
                            coverage_mask=self.coverage(labelled))


def ground_truth_targets(ds: GcdDataset, rows: np.ndarray, k: int) -> np.ndarray:
    """One-hot rows at each sample's prototype index."""
    return one_hot(ds.class_to_prototype()[ds.labels[rows]], k)


class MinimalProvider(TargetProvider):
    """Ground truth for labelled rows only."""

    kind = SupervisionKind.MINIMAL

    def view_targets(self, model, ds, indices, view, tau_t):
        return None

    def coverage(self, labelled: np.ndarray) -> np.ndarray:
        return labelled.copy()


class OracleProvider(TargetProvider):
    """Ground truth for every row, as if the whole batch were labelled."""

    kind = SupervisionKind.ORACLE

    def min_prototypes(self, ds: GcdDataset) -> int:
        return ds.num_classes

    def view_targets(self, model, ds, indices, view, tau_t):
        return ground_truth_targets(ds, indices, model.num_prototypes)


class SelfLabelProvider(TargetProvider):
    """Sinkhorn-Knopp over the student's cosine logits of the unlabelled rows."""

    kind = SupervisionKind.SELF_LABEL

    def view_targets(self, model, ds, indices, view, tau_t):
        unlabelled = ~ds.labelled_mask[indices]
        out = np.zeros((len(indices), model.num_prototypes))
        if unlabelled.any():
            out[unlabelled] = sinkhorn_knopp(model.cosine_logits(np.asarray(view)[unlabelled]),
                                             self.mode.sinkhorn_iters, self.mode.sinkhorn_reg)
        return out


class SelfDistilProvider(TargetProvider):
    """Sharpened, gradient-blocked predictions of the same network."""

    kind = SupervisionKind.SELF_DISTIL

    def view_targets(self, model, ds, indices, view, tau_t):
        if tau_t is None or tau_t <= 0:
            raise SupervisionModeError(f"self_distil needs a teacher temperature > 0, got {tau_t}")
        return model.teacher_assign(view, tau_t)


PROVIDERS: Dict[SupervisionKind, Type[TargetProvider]] = {
    provider.kind: provider
    for provider in (MinimalProvider, OracleProvider, SelfLabelProvider, SelfDistilProvider)
}


def make_provider(mode: SupervisionMode) -> TargetProvider:
    return PROVIDERS[SupervisionKind(mode.kind)](mode)


def provide_targets(mode: SupervisionMode, model: GcdModel, ds: GcdDataset, indices: np.ndarray,
                    views: ViewPair, tau_t: Optional[float] = None) -> PseudoLabels:
    """
    Targets of the active supervision setting for one batch.

    Labelled rows always get their ground-truth one-hot (old classes map to
    prototypes 0..|Y_l|-1). Unlabelled rows are uncovered (minimal), get
    ground truth (oracle), Sinkhorn assignments of the student balanced
    over the unlabelled rows alone (self_label)
    or teacher probabilities (self_distil), each computed from one view and
    used to supervise the other.

    Raises:
        SupervisionModeError: Too few prototypes for the mode, or a missing
            teacher temperature for self_distil.
    """
    return make_provider(mode).provide(model, ds, indices, views, tau_t)
