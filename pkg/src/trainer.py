import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from logs.logger import logger
from src.dataset import GcdDataset, augment
from src.evaluation import evaluate
from src.exceptions import NonFiniteValueError, NumericalAbortError, ZeroNormError
from src.losses import total_objective
from src.models import EvaluationReport, LossBreakdown, MetricsLog, MetricsRecord, ModelConfig, TrainConfig
from src.network import GcdModel
from src.utils import BATCH_STREAM, VIEW_STREAM, derive_seed


def cosine_lr(epoch: float, cfg: TrainConfig) -> float:
    """lr0 * (1 + cos(pi * t / T)) / 2."""
    return cfg.lr * (1.0 + math.cos(math.pi * epoch / cfg.epochs)) / 2.0


def teacher_temp(epoch: float, cfg: TrainConfig) -> float:
    """
    Teacher temperature: cosine from tau_t_start to tau_t_end over the warmup
    epochs, then constant. Without warmup it is tau_t_end throughout.
    """
    warmup = cfg.tau_t_warmup_epochs
    if not cfg.teacher_warmup or warmup == 0 or epoch >= warmup:
        return cfg.tau_t_end
    weight = (1.0 + math.cos(math.pi * epoch / warmup)) / 2.0
    return weight * cfg.tau_t_start + (1.0 - weight) * cfg.tau_t_end


def make_batches(ds: Union[GcdDataset, int], batch_size: int, epoch_seed: int) -> List[np.ndarray]:
    """Seeded shuffle of all row indices cut into chunks; the short last chunk is kept."""
    n = ds if isinstance(ds, int) else ds.num_samples
    order = np.random.default_rng(epoch_seed).permutation(n)
    return [order[start:start + batch_size] for start in range(0, n, batch_size)]


@dataclass
class TrainState:
    model: GcdModel
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    step: int = 0
    last_breakdown: Optional[LossBreakdown] = None

    def __post_init__(self) -> None:
        if not self.velocity:
            self.velocity = {name: np.zeros_like(value) for name, value in self.model.params.items()}


def sgd_update(state: TrainState, grads: Dict[str, np.ndarray], lr: float, cfg: TrainConfig) -> None:
    """v = momentum * v + (g + wd * w); w -= lr * v."""
    for name, param in state.model.params.items():
        grad = grads[name]
        if cfg.weight_decay:
            grad = grad + cfg.weight_decay * param
        state.velocity[name] = cfg.momentum * state.velocity[name] + grad
        state.model.params[name] = param - lr * state.velocity[name]


def train_step(state: TrainState, ds: GcdDataset, indices: np.ndarray, cfg: TrainConfig,
               lr: float, tau_t: float, view_seed: int) -> LossBreakdown:
    """
    One SGD-with-momentum step on a batch.

    Raises:
        NumericalAbortError: If the objective or a gradient is non-finite,
            or a row to be normalised has zero norm; carries the last finite
            loss breakdown.
    """
    views = augment(ds.features[indices], cfg.noise_std, cfg.mask_fraction, view_seed)
    try:
        result = total_objective(state.model, views, ds, indices, cfg, tau_t)
    except (NonFiniteValueError, ZeroNormError) as e:
        breakdown = state.last_breakdown.serialize() if state.last_breakdown else {}
        logger.error(f"Numerical failure at epoch {state.epoch} step {state.step}: {e}")
        raise NumericalAbortError(f"epoch {state.epoch} step {state.step}: {e}", breakdown) from e

    grads = result.graph.backward(result.loss)
    bad = [name for name, grad in grads.items() if not np.all(np.isfinite(grad))]
    if bad:
        logger.error(f"Non-finite gradients for {bad} at epoch {state.epoch} step {state.step}")
        raise NumericalAbortError(f"non-finite gradient for {bad}", result.breakdown.serialize())

    sgd_update(state, grads, lr, cfg)
    state.step += 1
    state.last_breakdown = result.breakdown
    return result.breakdown


def evaluate_model(model: GcdModel, ds: GcdDataset, cfg: TrainConfig) -> EvaluationReport:
    """Prototype-argmax predictions over D^u."""
    rows = ds.unlabelled_indices
    predictions = model.predict(ds.features[rows], cfg.tau_s)
    return evaluate(ds.labels[rows], predictions, ds.old_classes, model.num_prototypes,
                    num_classes=ds.num_classes, rematch_splits=cfg.rematch_splits,
                    active_min_count=cfg.active_min_count)


def train(cfg: TrainConfig, ds: GcdDataset, model_cfg: ModelConfig,
          on_epoch: Optional[Callable[[MetricsRecord], None]] = None) -> Tuple[GcdModel, MetricsLog]:
    """
    Full training run.

    Args:
        cfg: Optimisation, objective and evaluation settings.
        ds: Training data; evaluation runs on its unlabelled rows.
        model_cfg: Architecture and init seed.
        on_epoch: Called with every finished epoch's record.

    Returns:
        The trained model and one metrics record per epoch.
    """
    state = TrainState(model=GcdModel.init(model_cfg))
    log = MetricsLog()
    logger.info(f"Training {cfg.epochs} epochs on N={ds.num_samples}, K={model_cfg.num_prototypes}, "
                f"supervision={cfg.supervision.kind.value}, training={cfg.training.value}, "
                f"classifier_input={model_cfg.classifier_input.value}")

    for epoch in range(cfg.epochs):
        state.epoch = epoch
        lr = cosine_lr(epoch, cfg)
        tau_t = teacher_temp(epoch, cfg)
        breakdowns, skipped = [], 0
        for step, batch in enumerate(make_batches(ds, cfg.batch_size, derive_seed(cfg.seed, BATCH_STREAM, epoch))):
            if len(batch) < 2:
                skipped += 1
                logger.warning(f"Epoch {epoch}: skipped batch {step} with {len(batch)} row")
                continue
            breakdowns.append(train_step(state, ds, batch, cfg, lr, tau_t,
                                         derive_seed(cfg.seed, VIEW_STREAM, epoch, step)))

        record = MetricsRecord(epoch=epoch, lr=lr, tau_t=tau_t, losses=LossBreakdown.mean_of(breakdowns),
                               skipped_batches=skipped)
        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            report = evaluate_model(state.model, ds, cfg)
            record = record.model_copy(update={
                "acc_all": report.acc.acc_all, "acc_old": report.acc.acc_old, "acc_new": report.acc.acc_new,
                "taxonomy": report.taxonomy, "active_prototypes": report.active_prototypes,
                "marginal_kl": report.marginal_kl})
            logger.info(f"Epoch {epoch}: loss={record.losses.total:.4f} acc_all={report.acc.acc_all:.4f} "
                        f"acc_old={report.acc.acc_old:.4f} acc_new={report.acc.acc_new:.4f} "
                        f"active={report.active_prototypes}/{model_cfg.num_prototypes}")
        else:
            logger.info(f"Epoch {epoch}: loss={record.losses.total:.4f}")
        log.append(record)
        if on_epoch is not None:
            on_epoch(record)

    return state.model, log
