"""
Класс Validator - самопроверка сборки: DCT, эквивалентность сканов,
градиенты, тождество при инициализации и контракт заморозки
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Tuple

import numpy as np

from .adapters import LocalPathKind, TpMambaAdapter, adapter_forward
from .config import ModelSettings
from .data import N_CLASSES
from .fusion import CbaConfig, CrossBranchAttention, LoraPair, VitBlock, cross_branch_attention, lora_forward
from .mamba import MambaBlock, MambaBlockConfig
from .mfgc import FreqIndexSet, MfgcBlock, basis_matrix, dct_forward, idct, mfgc_forward
from .models import Decoder, assert_frozen, build_model, decode_3d
from .ssm import (SelectiveInputs, SsmParams, discretize, scan_parallel, scan_sequential, selective_scan,
                  selective_scan_naive)
from .tensor import Tensor, grad_check, no_grad, precision
from .training import Batch, OptimizerState, TrainConfig, loss_dice_ce, train_step

logger = logging.getLogger(__name__)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def tiny_settings(kind: str) -> ModelSettings:
    """Минимальные размеры модели для быстрых проверок"""
    return ModelSettings.for_kind(
        kind, sam_dim=16, sam_blocks=2, sam_heads=2, patch=4, image_size=8, mlp_ratio=2,
        mamba_dim=8, d_state=4, expand=1, cba_heads=2, cba_dk=4, volume_depth=2,
        adapter_dim=4, adapter_d_state=2, lora_rank=2 if kind == 'adapter_lora' else 0,
        max_adapter_ratio=10.0,
    )


class Validator:
    """Набор проверок; каждая возвращает (is_valid, errors)"""

    GRAD_TOLERANCE = 1e-3
    SCAN_TOLERANCE = 1e-5

    @staticmethod
    def check_dct(seed: int = 0) -> Tuple[bool, List[str]]:
        errors = []
        rng = np.random.default_rng(seed)
        index_set = FreqIndexSet.full((4, 4, 4))
        basis = basis_matrix(index_set).data.astype(np.float64)
        gram_error = np.abs(basis @ basis.T - np.eye(index_set.size)).max()
        if gram_error > 1e-5:
            errors.append(f"Матрица Грама базиса отличается от единичной на {gram_error:.2e}")

        with precision(np.float64):
            full = FreqIndexSet.full((8, 8, 8))
            x = rng.standard_normal((2, 8, 8, 8))
            back = idct(dct_forward(Tensor(x), full)).data
            rel = np.abs(back - x).max() / np.abs(x).max()
            if rel > 1e-4:
                errors.append(f"idct(dct(x)) отличается от x на {rel:.2e}")

            const = dct_forward(Tensor(np.full((1, 4, 4, 4), 3.0)), index_set).values.data[0]
            if np.abs(const[1:]).max() > 1e-9:
                errors.append("Постоянный объём дал ненулевые не-DC коэффициенты")
        return (len(errors) == 0, errors)

    @staticmethod
    def check_scan_equivalence(cases: int = 1000, seed: int = 0) -> Tuple[bool, List[str]]:
        """
        Параллельный скан против последовательного на случайных моделях

        Чётные случаи - фиксированная модель, нечётные - селективная: эталон
        по шагам сравнивается и с префиксным проходом, и с дифференцируемым
        selective_scan. L до 256, N до 8.
        """
        errors = []
        rng = np.random.default_rng(seed)
        worst = 0.0
        for case in range(cases):
            n_state = int(rng.integers(1, 9))
            length = int(rng.integers(1, 257))
            method = 'zoh' if case % 4 in (0, 3) else 'bilinear'
            if case % 2 == 0:
                params = SsmParams(
                    A=-rng.uniform(0.1, 2.0, size=n_state),
                    B=rng.standard_normal((n_state, 1)),
                    C=rng.standard_normal((1, n_state)),
                    D=rng.standard_normal((1, 1)),
                    delta=float(rng.uniform(0.01, 0.5)),
                )
                model = discretize(params, method)
                x = rng.standard_normal((length, 1))
                diff = np.abs(scan_parallel(model, x) - scan_sequential(model, x)[0]).max()
            else:
                channels = int(rng.integers(1, 4))
                inputs = SelectiveInputs(
                    delta=rng.uniform(0.01, 0.5, size=(length, channels)),
                    B=rng.standard_normal((length, n_state)),
                    C=rng.standard_normal((length, n_state)),
                    A=-rng.uniform(0.1, 2.0, size=(channels, n_state)),
                    D=rng.standard_normal(channels),
                )
                x = rng.standard_normal((length, channels))
                reference = selective_scan_naive(inputs, x, method)
                with precision(np.float64), no_grad():
                    tensors = SelectiveInputs(*(Tensor(v) for v in (inputs.delta, inputs.B, inputs.C,
                                                                    inputs.A, inputs.D)))
                    differentiable = selective_scan(tensors, Tensor(x), method).data
                diff = max(np.abs(scan_parallel(inputs, x, method=method) - reference).max(),
                           np.abs(differentiable - reference).max())
            worst = max(worst, float(diff))
        logger.debug(f"Scan equivalence: {cases} cases, worst difference {worst:.2e}")
        if worst >= Validator.SCAN_TOLERANCE:
            errors.append(f"Максимальное расхождение сканов {worst:.2e} >= {Validator.SCAN_TOLERANCE}")
        return (len(errors) == 0, errors)

    @staticmethod
    def gradient_cases(seed: int = 0) -> List[Tuple[str, Callable[[Tensor], Tensor], np.ndarray]]:
        """Скалярные функции и точки для проверки градиентов (вызывать под float64)"""
        rng = np.random.default_rng(seed)
        mamba = MambaBlock(MambaBlockConfig(d_model=4, d_state=2, expand=1, d_conv=2), rng)
        mfgc = MfgcBlock(2, (2, 2, 2), rng, reduction=2)
        cba = CrossBranchAttention(CbaConfig(d_mamba=3, d_sam=4, heads=2, d_k=2, d_v=2), rng)
        f_sam = Tensor(rng.standard_normal((3, 4)))
        vit = VitBlock(8, 2, rng, mlp_ratio=2)
        adapter = TpMambaAdapter(8, 4, (2, 2, 2), rng, LocalPathKind.CONV,
                                 MambaBlockConfig(d_model=4, d_state=2, expand=1, d_conv=2))
        adapter.up_proj.weight.data[...] = rng.standard_normal(adapter.up_proj.weight.shape) * 0.3
        decoder = Decoder(4, 3, 1, rng, min_channels=2)
        labels = rng.integers(0, N_CLASSES, size=(1, 2, 2))
        weights = Tensor(rng.standard_normal((3, 4)))
        return [
            ('mamba_block_forward', lambda t: (mamba(t) * weights).sum(), rng.standard_normal((3, 4))),
            ('mfgc_forward', lambda t: (mfgc_forward(t, mfgc) ** 2).sum(), rng.standard_normal((2, 2, 2, 2))),
            ('cross_branch_attention', lambda t: (cross_branch_attention(t, f_sam, cba) * f_sam).sum(),
             rng.standard_normal((3, 3))),
            ('vit_block_forward', lambda t: (vit(t) ** 2).mean(), rng.standard_normal((4, 8))),
            ('adapter_forward', lambda t: (adapter_forward(adapter, t, (2, 2, 2)) ** 2).sum(),
             rng.standard_normal((8, 8))),
            ('decode_3d', lambda t: (decode_3d(decoder, t) ** 2).sum(), rng.standard_normal((1, 4, 1, 2, 2))),
            ('loss_dice_ce', lambda t: loss_dice_ce(t, labels), rng.standard_normal((1, N_CLASSES, 2, 2))),
        ]

    @staticmethod
    def check_gradients(seed: int = 0) -> Tuple[bool, List[str]]:
        errors = []
        with precision(np.float64):
            for name, fn, point in Validator.gradient_cases(seed):
                error = grad_check(fn, point, eps=1e-5)
                if error >= Validator.GRAD_TOLERANCE:
                    errors.append(f"{name}: относительная ошибка градиента {error:.2e}")
        return (len(errors) == 0, errors)

    @staticmethod
    def check_init_identity(seed: int = 0) -> Tuple[bool, List[str]]:
        errors = []
        for kind in ('adapter_conv', 'adapter_mfgc', 'adapter_lora'):
            model = build_model(kind, tiny_settings(kind), seed)
            volume = Tensor(np.random.default_rng(seed).random((1, 1, 2, 8, 8)))
            with no_grad():
                adapted = model.encode(volume).data
                frozen = model.encode(volume, with_adapters=False).data
            if adapted.tobytes() != frozen.tobytes():
                errors.append(f"{kind}: выход кодировщика при инициализации отличается от замороженного")

        rng = np.random.default_rng(seed)
        weight = Tensor(rng.standard_normal((6, 5)))
        x = Tensor(rng.standard_normal((3, 6)))
        pair = LoraPair(6, 5, 2, rng)
        if lora_forward(x, weight, pair).data.tobytes() != (x @ weight).data.tobytes():
            errors.append("LoRA с нулевой up-матрицей меняет выход слоя")
        return (len(errors) == 0, errors)

    @staticmethod
    def check_freeze(steps: int = 50, seed: int = 0) -> Tuple[bool, List[str]]:
        """steps шагов обучения dual_branch и adapter_mfgc: замороженные веса бит в бит прежние"""
        errors = []
        rng = np.random.default_rng(seed)
        for kind in ('dual_branch', 'adapter_mfgc'):
            model = build_model(kind, tiny_settings(kind), seed)
            before = {n: p.data.copy() for n, p in model.named_parameters() if p.requires_grad}
            if kind == 'dual_branch':
                batch = Batch(images=rng.random((2, 1, 8, 8)).astype(np.float32),
                              labels=rng.integers(0, N_CLASSES, size=(2, 8, 8)))
            else:
                batch = Batch(images=rng.random((1, 1, 2, 8, 8)).astype(np.float32),
                              labels=rng.integers(0, N_CLASSES, size=(1, 2, 8, 8)))
            cfg = TrainConfig(base_lr=1e-2, warmup_steps=0, total_steps=steps)
            state = OptimizerState()
            for _ in range(steps):
                _, state = train_step(model, batch, cfg, state)
            report = assert_frozen(model.policy, model)
            if not report.all_passed:
                errors.append(f"{kind}: изменились замороженные параметры {report.failed[:3]}")
            changed = any(
                p.data.tobytes() != before[n].tobytes()
                for n, p in model.named_parameters() if p.requires_grad
            )
            if not changed:
                errors.append(f"{kind}: обучаемые параметры не изменились")
        return (len(errors) == 0, errors)

    @staticmethod
    def run_all(scan_cases: int = 1000, seed: int = 0, freeze_steps: int = 50) -> List[CheckResult]:
        """Запускает все проверки по очереди"""
        checks = [
            ('dct_roundtrip', lambda: Validator.check_dct(seed)),
            ('scan_equivalence', lambda: Validator.check_scan_equivalence(scan_cases, seed)),
            ('grad_checks', lambda: Validator.check_gradients(seed)),
            ('init_identity', lambda: Validator.check_init_identity(seed)),
            ('freeze_contract', lambda: Validator.check_freeze(freeze_steps, seed)),
        ]
        results = []
        for name, check in checks:
            is_valid, errors = check()
            results.append(CheckResult(name=name, passed=is_valid, detail='; '.join(errors)))
            logger.info(f"Selftest {name}: {'PASS' if is_valid else 'FAIL'}")
        return results
