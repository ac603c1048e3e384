"""
Тесты потерь, расписания, оптимизатора и цикла обучения
"""

import pytest
import math
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.config import ModelSettings
from src.data import LabeledVolume, PhantomSpec, extract_patches, generate_phantom, normalize_percentile
from src.errors import DimensionError, NumericError, ParameterError
from src.models import assert_frozen, build_model
from src.nn import Parameter
from src.tensor import Tensor, grad_check, precision
from src.training import (Batch, OptimizerState, TrainConfig, clip_grad_norm, evaluate, fit,
                          global_grad_norm, loss_dice_ce, lr_at, make_batch, predict_labels,
                          steps_per_epoch, train_step)
from src.validator import tiny_settings


def random_volumes(n, dims, seed=0):
    rng = np.random.default_rng(seed)
    return [
        LabeledVolume(image=rng.random((1,) + dims), labels=rng.integers(0, 4, size=dims))
        for _ in range(n)
    ]


class TestLoss:
    """Тесты Dice + CE"""

    def test_confident_correct_is_near_zero(self):
        """Уверенное верное предсказание даёт потери около нуля"""
        labels = np.random.default_rng(0).integers(0, 4, size=(3, 5))
        logits = np.moveaxis(np.eye(4)[labels], -1, 0) * 50.0
        with precision(np.float64):
            assert loss_dice_ce(Tensor(logits), labels).item() < 1e-4

    def test_uniform_logits(self):
        """Равномерные логиты: CE = ln K, Dice по формуле"""
        labels = np.array([[0, 1], [2, 3]])
        with precision(np.float64):
            loss = loss_dice_ce(Tensor(np.zeros((4, 2, 2))), labels).item()
        dice = (2 * 0.25 + 1e-5) / (1.0 + 1.0 + 1e-5)
        assert loss == pytest.approx((1.0 - dice) + math.log(4))

    def test_batched_matches_single(self):
        """[K, ...] и [1, K, ...] дают одинаковые потери"""
        rng = np.random.default_rng(1)
        logits = rng.standard_normal((4, 3, 3))
        labels = rng.integers(0, 4, size=(3, 3))
        with precision(np.float64):
            single = loss_dice_ce(Tensor(logits), labels).item()
            batched = loss_dice_ce(Tensor(logits[None]), labels[None]).item()
        assert single == pytest.approx(batched)

    def test_gradient(self):
        """Градиент потерь по логитам"""
        rng = np.random.default_rng(2)
        labels = rng.integers(0, 4, size=(2, 3, 3))
        with precision(np.float64):
            error = grad_check(lambda t: loss_dice_ce(t, labels),
                               rng.standard_normal((2, 4, 3, 3)), eps=1e-6)
        assert error < 1e-4

    def test_label_out_of_range(self):
        """Метка не меньше K"""
        with pytest.raises(ParameterError):
            loss_dice_ce(Tensor(np.zeros((4, 2))), np.array([0, 4]))

    def test_shape_mismatch(self):
        """Логиты и разметка не согласованы"""
        with pytest.raises(DimensionError):
            loss_dice_ce(Tensor(np.zeros((4, 2, 2))), np.zeros((2, 3), dtype=np.int64))


class TestSchedule:
    """Тесты расписания скорости обучения"""

    @pytest.fixture
    def cfg(self):
        return TrainConfig(base_lr=2e-4, warmup_steps=10, total_steps=100)

    def test_warmup(self, cfg):
        """Линейный разогрев от нуля"""
        assert lr_at(cfg, 0) == 0.0
        assert lr_at(cfg, 5) == pytest.approx(1e-4)

    def test_cosine(self, cfg):
        """Косинус от base_lr после разогрева до нуля в конце"""
        assert lr_at(cfg, 10) == pytest.approx(2e-4)
        assert lr_at(cfg, 55) == pytest.approx(1e-4)
        assert lr_at(cfg, 100) == pytest.approx(0.0, abs=1e-12)

    def test_monotone_after_warmup(self, cfg):
        """После разогрева скорость не растёт"""
        values = [lr_at(cfg, s) for s in range(10, 101)]
        assert all(b <= a for a, b in zip(values, values[1:]))

    def test_step_out_of_range(self, cfg):
        """Шаг за пределами расписания"""
        with pytest.raises(ParameterError):
            lr_at(cfg, 101)

    def test_bad_config(self):
        """Разогрев не короче всего обучения"""
        with pytest.raises(ParameterError):
            TrainConfig(warmup_steps=10, total_steps=10)
        with pytest.raises(ParameterError):
            TrainConfig(clip_norm=0.0)


class TestOptimizer:
    """Тесты обрезки градиента и шага обучения"""

    def test_clip(self):
        """Общая норма 5 обрезается до 1"""
        a, b = Parameter(np.zeros(1)), Parameter(np.zeros(1))
        a.grad, b.grad = np.array([3.0]), np.array([4.0])
        assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
        assert global_grad_norm([a, b]) == pytest.approx(1.0, rel=1e-5)

    def test_no_clip_below_threshold(self):
        """Малые градиенты не меняются"""
        a = Parameter(np.zeros(2))
        a.grad = np.array([0.3, 0.4])
        clip_grad_norm([a], 1.0)
        np.testing.assert_array_equal(a.grad, [0.3, 0.4])

    def test_train_step_keeps_frozen(self):
        """Шаг меняет обучаемые веса и не трогает замороженные"""
        model = build_model('dual_branch', tiny_settings('dual_branch'), seed=0)
        before = {n: p.data.copy() for n, p in model.named_parameters() if p.requires_grad}
        batch = make_batch(random_volumes(2, (1, 8, 8)), two_d=True)
        cfg = TrainConfig(base_lr=1e-2, warmup_steps=0, total_steps=5)

        result, state = train_step(model, batch, cfg, OptimizerState())
        assert state.step == 1
        assert math.isfinite(result.loss)
        assert result.lr == pytest.approx(lr_at(cfg, 1))
        assert assert_frozen(model.policy, model).all_passed
        changed = [n for n, p in model.named_parameters() if n in before and not np.array_equal(p.data, before[n])]
        assert changed

    def test_non_finite_loss(self):
        """NaN во входе - NumericError, веса не меняются"""
        model = build_model('dual_branch', tiny_settings('dual_branch'), seed=0)
        before = [p.data.copy() for _, p in model.named_parameters()]
        batch = Batch(images=np.full((1, 1, 8, 8), np.nan, dtype=np.float32),
                      labels=np.zeros((1, 8, 8), dtype=np.int64))
        with pytest.raises(NumericError):
            train_step(model, batch, TrainConfig(total_steps=5, warmup_steps=0), OptimizerState())
        for (_, p), old in zip(model.named_parameters(), before):
            np.testing.assert_array_equal(p.data, old)

    def test_make_batch_2d_requires_depth_one(self):
        """2D-пакет из патчей глубины больше 1"""
        with pytest.raises(DimensionError):
            make_batch(random_volumes(1, (2, 8, 8)), two_d=True)


class TestTrainStep:
    """Тесты запоминания одного пакета"""

    @staticmethod
    def fixed_batch(kind, dims, patch):
        """Центральные вырезки одного фантома: пакет из двух срезов или двух патчей"""
        lv = generate_phantom(PhantomSpec(dims=dims), seed=0)
        lv = LabeledVolume(image=normalize_percentile(lv.image), labels=lv.labels, spacing=lv.spacing)
        if kind == 'dual_branch':
            patch = (1,) + tuple(patch[1:])
        top = [(d - s) // 2 for d, s in zip(dims, patch)]
        items = [lv.crop((top[0] + i, top[1], top[2]), patch) for i in range(2)]
        return make_batch(items, two_d=kind == 'dual_branch')

    @staticmethod
    def run_steps(model, batch, cfg, steps):
        state = OptimizerState()
        losses = []
        for _ in range(steps):
            result, state = train_step(model, batch, cfg, state)
            losses.append(result.loss)
        return losses

    def test_overfit_config(self):
        """Почти постоянная скорость 1e-2 на первые 100 шагов, без затухания весов"""
        cfg = TrainConfig.overfit(seed=3)
        assert cfg.weight_decay == 0.0 and cfg.seed == 3
        assert lr_at(cfg, 5) == pytest.approx(1e-2)
        assert lr_at(cfg, 100) > 0.97e-2

    @pytest.mark.parametrize('kind', ['dual_branch', 'adapter_conv'])
    def test_overfit_fixed_batch(self, kind):
        """На одном пакете потери на шаге 100 меньше 0.2 от потерь на шаге 0"""
        model = build_model(kind, tiny_settings(kind), seed=0)
        batch = self.fixed_batch(kind, (16, 16, 16), (2, 8, 8))
        losses = self.run_steps(model, batch, TrainConfig.overfit(), 101)
        assert all(math.isfinite(v) for v in losses)
        assert losses[100] < 0.2 * losses[0]
        assert assert_frozen(model.policy, model).all_passed

    @pytest.mark.slow
    def test_overfit_fixed_batch_desk(self):
        """То же на размерах модели по умолчанию: патчи 16×64×64 из фантома 20×80×80"""
        settings = ModelSettings.for_kind('adapter_conv')
        model = build_model('adapter_conv', settings, seed=0)
        patch = (settings.volume_depth, settings.image_size, settings.image_size)
        batch = self.fixed_batch('adapter_conv', (20, 80, 80), patch)
        losses = self.run_steps(model, batch, TrainConfig.overfit(), 101)
        assert losses[100] < 0.2 * losses[0]

    def test_frozen_after_fifty_steps(self):
        """50 шагов: хеши замороженных весов прежние, обучаемые веса изменились"""
        model = build_model('adapter_mfgc', tiny_settings('adapter_mfgc'), seed=0)
        before = {n: p.data.copy() for n, p in model.named_parameters() if p.requires_grad}
        batch = self.fixed_batch('adapter_mfgc', (16, 16, 16), (2, 8, 8))
        cfg = TrainConfig(base_lr=1e-3, warmup_steps=5, total_steps=50)
        self.run_steps(model, batch, cfg, 50)
        report = assert_frozen(model.policy, model)
        assert report.all_passed, report.failed
        assert any(not np.array_equal(p.data, before[n])
                   for n, p in model.named_parameters() if n in before)


class TestFit:
    """Тесты цикла обучения и оценки"""

    def test_fit_saves_best(self, tmp_path):
        """История по эпохам и контрольная точка лучшей эпохи"""
        model = build_model('adapter_conv', tiny_settings('adapter_conv'), seed=0)
        train = random_volumes(3, (2, 8, 8), seed=1)
        val = random_volumes(1, (2, 8, 8), seed=2)
        total = 2 * steps_per_epoch(len(train), 2)
        cfg = TrainConfig(base_lr=1e-3, warmup_steps=1, total_steps=total, batch_size=2)
        path = tmp_path / 'best.ckpt'

        history = fit(model, train, val, cfg, epochs=2, checkpoint_path=str(path))
        assert [r.epoch for r in history.records] == [1, 2]
        assert history.best_epoch in (1, 2)
        assert path.is_file()
        assert all(len(row) == len(history.HEADER) for row in history.rows())

    def test_fit_step_budget(self):
        """total_steps меньше числа шагов обучения"""
        model = build_model('adapter_conv', tiny_settings('adapter_conv'))
        with pytest.raises(ParameterError):
            fit(model, random_volumes(4, (2, 8, 8)), [], TrainConfig(warmup_steps=0, total_steps=2,
                                                                     batch_size=1), epochs=1)

    def test_predict_and_evaluate(self):
        """Предсказание [D, H, W] и отчёт по всем случаям"""
        model = build_model('dual_branch', tiny_settings('dual_branch'))
        cases = random_volumes(2, (3, 8, 8), seed=3)
        assert predict_labels(model, cases[0]).shape == (3, 8, 8)
        report = evaluate(model, cases)
        assert report.cases == 2
        assert 0.0 <= report.mean_dice <= 1.0

    def test_evaluate_needs_labels(self):
        """Оценка без разметки"""
        model = build_model('dual_branch', tiny_settings('dual_branch'))
        with pytest.raises(ParameterError):
            evaluate(model, [LabeledVolume(image=np.zeros((1, 8, 8)))])

    @pytest.mark.slow
    def test_learns_on_phantoms(self):
        """Уменьшенный прогон на фантомах: потери падают, Dice на валидации растёт"""
        settings = tiny_settings('adapter_mfgc')
        model = build_model('adapter_mfgc', settings, seed=0)
        spec = PhantomSpec(dims=(16, 16, 16))
        cases = []
        for seed in range(8):
            lv = generate_phantom(spec, seed)
            cases.append(LabeledVolume(image=normalize_percentile(lv.image), labels=lv.labels,
                                       spacing=lv.spacing))
        train = [p for i, lv in enumerate(cases[:6]) for p in extract_patches(lv, (2, 8, 8), 2, seed=i)]
        val = [p for i, lv in enumerate(cases[6:]) for p in extract_patches(lv, (2, 8, 8), 2, seed=50 + i)]
        epochs = 15
        cfg = TrainConfig(base_lr=1e-2, warmup_steps=2, weight_decay=0.0, batch_size=2,
                          total_steps=epochs * steps_per_epoch(len(train), 2))
        untrained = evaluate(model, val).mean_dice

        history = fit(model, train, val, cfg, epochs=epochs)
        assert history.records[-1].loss < 0.6 * history.records[0].loss
        assert history.best_dice >= untrained
        assert assert_frozen(model.policy, model).all_passed
