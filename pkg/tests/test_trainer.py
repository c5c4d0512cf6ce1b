import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.dataset import generate
from src.exceptions import NonFiniteValueError, NumericalAbortError, ZeroNormError
from src.models import GenConfig, ModelConfig, SupervisionKind, SupervisionMode, TrainConfig
from src.network import GcdModel
from src.trainer import (TrainState, cosine_lr, evaluate_model, make_batches, sgd_update, teacher_temp,
                         train, train_step)


class TestSchedules:
    def test_cosine_lr_endpoints(self):
        cfg = TrainConfig()
        assert cosine_lr(0, cfg) == 0.1
        assert cosine_lr(cfg.epochs, cfg) == pytest.approx(0.0, abs=1e-15)
        assert cosine_lr(cfg.epochs / 2, cfg) == pytest.approx(0.05)

    def test_teacher_temperature_warmup(self):
        cfg = TrainConfig()
        assert teacher_temp(0, cfg) == 0.07
        assert teacher_temp(30, cfg) == 0.04
        assert teacher_temp(150, cfg) == 0.04
        assert 0.04 < teacher_temp(15, cfg) < 0.07

    def test_teacher_temperature_is_monotone(self):
        cfg = TrainConfig()
        temps = [teacher_temp(epoch, cfg) for epoch in range(31)]
        assert all(a >= b for a, b in zip(temps, temps[1:]))

    @pytest.mark.parametrize("update", [{"teacher_warmup": False}, {"tau_t_warmup_epochs": 0}])
    def test_without_warmup_temperature_is_constant(self, update):
        cfg = TrainConfig(**update)
        assert {teacher_temp(epoch, cfg) for epoch in range(40)} == {0.04}


class TestBatches:
    def test_cover_every_index_once(self):
        batches = make_batches(50, 16, epoch_seed=3)
        assert [len(b) for b in batches] == [16, 16, 16, 2]
        assert sorted(np.concatenate(batches).tolist()) == list(range(50))

    def test_seeded(self, small_ds):
        first = make_batches(small_ds, 10, epoch_seed=8)
        second = make_batches(small_ds, 10, epoch_seed=8)
        assert all(np.array_equal(a, b) for a, b in zip(first, second))


class TestOptimizer:
    def test_sgd_momentum_and_weight_decay(self, small_model_cfg):
        model = GcdModel.init(small_model_cfg)
        before = model.copy().params
        state = TrainState(model=model)
        grads = {name: np.ones_like(value) for name, value in before.items()}
        cfg = TrainConfig(momentum=0.9, weight_decay=0.01)

        sgd_update(state, grads, lr=0.1, cfg=cfg)
        for name, value in before.items():
            velocity = 1.0 + 0.01 * value
            assert_allclose(state.velocity[name], velocity, rtol=1e-12, atol=1e-14)
            assert_allclose(model.params[name], value - 0.1 * velocity, rtol=1e-12, atol=1e-14)

        middle = model.copy().params
        sgd_update(state, grads, lr=0.1, cfg=cfg)
        for name, value in before.items():
            velocity = 0.9 * (1.0 + 0.01 * value) + 1.0 + 0.01 * middle[name]
            assert_allclose(model.params[name], middle[name] - 0.1 * velocity, rtol=1e-12, atol=1e-14)

    def test_zero_learning_rate_keeps_parameters(self, small_ds, small_model_cfg):
        state = TrainState(model=GcdModel.init(small_model_cfg))
        before = state.model.copy()
        breakdown = train_step(state, small_ds, np.arange(16), TrainConfig(), lr=0.0, tau_t=0.07, view_seed=0)
        assert state.model == before
        assert state.step == 1
        assert np.isfinite(breakdown.total)

    def test_non_finite_objective_aborts(self, small_ds, small_model_cfg, monkeypatch):
        def broken(*args, **kwargs):
            raise NonFiniteValueError(7, "log")

        monkeypatch.setattr("src.trainer.total_objective", broken)
        state = TrainState(model=GcdModel.init(small_model_cfg))
        with pytest.raises(NumericalAbortError) as info:
            train_step(state, small_ds, np.arange(8), TrainConfig(), lr=0.1, tau_t=0.07, view_seed=0)
        assert info.value.kind == "numerical_abort"
        assert info.value.breakdown == {}

    def test_zero_norm_row_aborts_with_last_breakdown(self, small_ds, small_model_cfg, monkeypatch):
        state = TrainState(model=GcdModel.init(small_model_cfg))
        train_step(state, small_ds, np.arange(8), TrainConfig(), lr=0.1, tau_t=0.07, view_seed=0)

        def degenerate(*args, **kwargs):
            raise ZeroNormError("node 26: row 6 has zero norm and cannot be normalised")

        monkeypatch.setattr("src.trainer.total_objective", degenerate)
        with pytest.raises(NumericalAbortError) as info:
            train_step(state, small_ds, np.arange(8), TrainConfig(), lr=0.1, tau_t=0.07, view_seed=1)
        assert info.value.kind == "numerical_abort"
        assert info.value.breakdown == state.last_breakdown.serialize()
        assert "total" in info.value.breakdown


class TestTrain:
    def test_deterministic(self, small_ds, small_model_cfg, fast_train_cfg):
        model_a, log_a = train(fast_train_cfg, small_ds, small_model_cfg)
        model_b, log_b = train(fast_train_cfg, small_ds, small_model_cfg)
        assert model_a == model_b
        assert [r.serialize() for r in log_a.records] == [r.serialize() for r in log_b.records]

    def test_one_record_per_epoch(self, small_ds, small_model_cfg, fast_train_cfg):
        seen = []
        _, log = train(fast_train_cfg, small_ds, small_model_cfg, on_epoch=seen.append)
        assert len(log) == 2
        assert [r.epoch for r in seen] == [0, 1]
        assert log.records[0].lr == 0.1
        assert log.records[0].tau_t == 0.07
        assert log.last.acc_all is not None
        assert abs(log.last.losses.reconstruct(fast_train_cfg.sup_weight, fast_train_cfg.entropy_weight)
                   - log.last.losses.total) < 1e-9

    def test_single_row_batch_is_skipped(self, small_ds, small_model_cfg):
        cfg = TrainConfig(epochs=1, batch_size=small_ds.num_samples - 1, seed=2)
        _, log = train(cfg, small_ds, small_model_cfg)
        assert log.last.skipped_batches == 1

    def test_evaluation_fields_are_null_between_evaluations(self, small_ds, small_model_cfg):
        cfg = TrainConfig(epochs=3, batch_size=24, eval_every=2, tau_t_warmup_epochs=1)
        _, log = train(cfg, small_ds, small_model_cfg)
        evaluated = [r.acc_all is not None for r in log.records]
        assert evaluated == [False, True, True]
        assert log.records[0].serialize()["taxonomy"] is None

    def test_evaluate_model_scores_unlabelled_rows(self, small_ds, small_model_cfg):
        report = evaluate_model(GcdModel.init(small_model_cfg), small_ds, TrainConfig())
        assert report.acc.num_samples == len(small_ds.unlabelled_indices)
        assert report.num_prototypes == 4
        assert 0.0 <= report.acc.acc_all <= 1.0


def gmm(seed: int) -> tuple:
    """The standard synthetic instance: 10 classes, 5 old, D=32, r/sigma=8."""
    ds = generate(GenConfig(num_classes=10, samples_per_class=200, feature_dim=32,
                            class_radius=8.0, class_std=1.0, seed=seed))
    return ds, ModelConfig(feature_dim=32, num_prototypes=10, seed=seed)


def trend_run(seed: int, epochs: int = 100, num_prototypes: int = 10, **train_kwargs):
    ds, model_cfg = gmm(seed)
    model_cfg = model_cfg.model_copy(update={"num_prototypes": num_prototypes})
    cfg = TrainConfig(epochs=epochs, eval_every=epochs, seed=seed, **train_kwargs)
    model, _ = train(cfg, ds, model_cfg)
    return evaluate_model(model, ds, cfg)


@pytest.mark.slow
class TestTrends:
    def test_oracle_supervision_sanity(self):
        report = trend_run(0, epochs=30, supervision=SupervisionMode(kind=SupervisionKind.ORACLE))
        assert report.acc.acc_all >= 0.99

    def test_entropy_regulariser_reduces_prediction_bias(self):
        gains = []
        for seed in range(3):
            without = trend_run(seed, entropy_weight=0.0)
            with_reg = trend_run(seed, entropy_weight=1.0)
            assert with_reg.marginal_kl < without.marginal_kl
            gains.append(with_reg.acc.acc_new - without.acc.acc_new)
        assert np.mean(gains) >= 0.05

    def test_over_provisioned_prototypes_stay_inactive(self):
        close = 0
        for seed in range(3):
            exact = trend_run(seed, entropy_weight=2.0)
            doubled = trend_run(seed, num_prototypes=20, entropy_weight=2.0)
            assert abs(doubled.acc.acc_all - exact.acc.acc_all) <= 0.10
            close += abs(doubled.active_prototypes - 10) <= 2
        assert close >= 2

    def test_supervision_ladder(self):
        ladder = [SupervisionKind.ORACLE, SupervisionKind.SELF_DISTIL,
                  SupervisionKind.SELF_LABEL, SupervisionKind.MINIMAL]
        acc_new = {}
        for kind in ladder:
            runs = [trend_run(seed, epochs=30, supervision=SupervisionMode(kind=kind)) for seed in range(3)]
            acc_new[kind] = np.mean([run.acc.acc_new for run in runs])
        for better, worse in zip(ladder, ladder[1:]):
            assert acc_new[better] - acc_new[worse] >= 0.03
