"""
Multi-Frequency Gated Convolution - частотный анализ 3D DCT, пулинг по
частотам, сигмоидный гейт по каналам и обратное преобразование
"""

import functools
import itertools
import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import DimensionError, ParameterError
from .nn import Linear, Module
from .tensor import Tensor, as_tensor, get_dtype

logger = logging.getLogger(__name__)

Triple = Tuple[int, int, int]

GATE_ACTIVATIONS = ('gelu', 'relu')


@dataclass(frozen=True)
class FreqIndexSet:
    """
    Набор частотных индексов (z, u, v) внутри границ (D_s, H_s, W_s)
    """
    indices: Tuple[Triple, ...]
    bounds: Triple

    def __post_init__(self):
        if len(self.bounds) != 3 or min(self.bounds) < 1:
            raise ParameterError(f"Границы должны быть тремя положительными числами: {self.bounds}")
        seen = set()
        for k in self.indices:
            if len(k) != 3 or any(not 0 <= c < b for c, b in zip(k, self.bounds)):
                raise ParameterError(f"Индекс {k} вне границ {self.bounds}")
            if k in seen:
                raise ParameterError(f"Повторяющийся индекс {k}")
            seen.add(k)

    @classmethod
    def full(cls, bounds: Triple) -> 'FreqIndexSet':
        """Полный куб частот - преобразование обратимо"""
        bounds = tuple(int(b) for b in bounds)
        return cls(indices=tuple(itertools.product(*(range(b) for b in bounds))), bounds=bounds)

    @classmethod
    def low_frequency(cls, bounds: Triple, cube: Triple = (2, 2, 2)) -> 'FreqIndexSet':
        """Низкочастотный подкуб (для больших размеров)"""
        bounds = tuple(int(b) for b in bounds)
        sizes = [min(c, b) for c, b in zip(cube, bounds)]
        return cls(indices=tuple(itertools.product(*(range(s) for s in sizes))), bounds=bounds)

    @property
    def size(self) -> int:
        return len(self.indices)


@dataclass(eq=False)
class FreqCoeffs:
    """Коэффициенты X^{s,k}: values имеет форму [..., C, K]"""
    values: Tensor
    index_set: FreqIndexSet


@dataclass(eq=False)
class PooledStats:
    """Канальные статистики по частотам: каждая [..., C]"""
    avg: Tensor
    max: Tensor
    min: Tensor


def _dct_1d(n: int, freq: int) -> np.ndarray:
    scale = math.sqrt(1.0 / n) if freq == 0 else math.sqrt(2.0 / n)
    positions = np.arange(n) + 0.5
    return scale * np.cos(math.pi / n * positions * freq)


def dct_basis(bounds: Triple, k: Triple) -> Tensor:
    """
    Ортонормированная базисная функция DCT-II

    B(d, h, w) = s_z cos(π/D (d+½) z) · s_u cos(π/H (h+½) u) · s_v cos(π/W (w+½) v),
    где s = √(1/n) для нулевой частоты и √(2/n) иначе.

    Raises:
        ParameterError: k вне границ
    """
    bounds = tuple(int(b) for b in bounds)
    if len(k) != 3 or any(not 0 <= c < b for c, b in zip(k, bounds)):
        raise ParameterError(f"Частота {k} вне границ {bounds}")
    vz, vu, vv = (_dct_1d(n, f) for n, f in zip(bounds, k))
    return Tensor(np.einsum('d,h,w->dhw', vz, vu, vv))


@functools.lru_cache(maxsize=64)
def _basis_matrix(index_set: FreqIndexSet) -> np.ndarray:
    """Матрица K×(D·H·W) из развёрнутых базисных функций (float64)"""
    bounds = index_set.bounds
    tables = [np.stack([_dct_1d(n, f) for f in range(n)]) for n in bounds]
    rows = [
        np.einsum('d,h,w->dhw', tables[0][z], tables[1][u], tables[2][v]).reshape(-1)
        for z, u, v in index_set.indices
    ]
    if not rows:
        return np.zeros((0, int(np.prod(bounds))))
    return np.stack(rows)


def basis_matrix(index_set: FreqIndexSet) -> Tensor:
    return Tensor(_basis_matrix(index_set))


def dct_forward(X: Tensor, index_set: FreqIndexSet) -> FreqCoeffs:
    """
    Прямое преобразование: X^{k}_c = Σ_{d,h,w} X_{c,d,h,w} · B_k(d,h,w)

    Args:
        X: [C, D, H, W] или [B, C, D, H, W]
        index_set: Частоты

    Returns:
        FreqCoeffs с values [..., C, K]
    """
    X = as_tensor(X)
    if X.ndim < 4 or tuple(X.shape[-3:]) != tuple(index_set.bounds):
        raise DimensionError(f"Объём {X.shape} не совпадает с границами {index_set.bounds}")
    flat = X.reshape(X.shape[:-3] + (int(np.prod(index_set.bounds)),))
    return FreqCoeffs(values=flat @ basis_matrix(index_set).T, index_set=index_set)


def idct(coeffs: FreqCoeffs, index_set: Optional[FreqIndexSet] = None) -> Tensor:
    """
    Обратное преобразование: X̂ = Σ_k coeff_k · B_k

    На полном наборе частот - точная обратная к dct_forward, на неполном -
    проекция на подпространство выбранных частот.
    """
    index_set = index_set or coeffs.index_set
    if coeffs.index_set != index_set or coeffs.values.shape[-1] != index_set.size:
        raise DimensionError("Коэффициенты не соответствуют набору частот")
    values = coeffs.values
    volume_shape = values.shape[:-1] + tuple(index_set.bounds)
    if index_set.size == 0:
        return Tensor(np.zeros(volume_shape, dtype=get_dtype()))
    return (values @ basis_matrix(index_set)).reshape(volume_shape)


def freq_pool(coeffs: FreqCoeffs) -> PooledStats:
    """Среднее, максимум и минимум по K частотам для каждого канала"""
    values = coeffs.values
    if values.shape[-1] == 0:
        raise ParameterError("Пулинг по пустому набору частот")
    return PooledStats(
        avg=values.mean(axis=-1),
        max=values.max(axis=-1),
        min=values.min(axis=-1),
    )


class GateMlp(Module):
    """
    Общая пара W_1 (C -> C/r) и W_r (C/r -> C) для трёх пулингов
    """

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4,
                 activation: str = 'gelu'):
        super().__init__()
        if reduction < 1:
            raise ParameterError(f"reduction должен быть >= 1, получено {reduction}")
        if activation not in GATE_ACTIVATIONS:
            raise ParameterError(f"Неизвестная активация гейта: {activation}")
        self.channels = channels
        self.reduction = reduction
        self.activation = activation
        hidden = max(1, channels // reduction)
        self.w1 = Linear(channels, hidden, rng, bias=False)
        self.wr = Linear(hidden, channels, rng, bias=False)

    def branch(self, z: Tensor) -> Tensor:
        hidden = self.w1(z)
        hidden = hidden.gelu() if self.activation == 'gelu' else hidden.relu()
        return self.wr(hidden)


def freq_gate(stats: PooledStats, gate: GateMlp) -> Tensor:
    """M = σ(Σ_{pool ∈ {avg, max, min}} W_r δ(W_1 Z_pool)), форма [..., C]"""
    if stats.avg.shape[-1] != gate.channels:
        raise DimensionError(f"Статистики {stats.avg.shape} не подходят к гейту на {gate.channels} каналов")
    total = gate.branch(stats.avg) + gate.branch(stats.max) + gate.branch(stats.min)
    return total.sigmoid()


class MfgcBlock(Module):
    """Частотно-гейтированная обработка объёма [.., C, D, H, W]"""

    def __init__(self, channels: int, bounds: Triple, rng: np.random.Generator,
                 reduction: int = 4, activation: str = 'gelu', low_frequency: bool = False,
                 cube: Triple = (2, 2, 2)):
        super().__init__()
        bounds = tuple(int(b) for b in bounds)
        self.index_set = (FreqIndexSet.low_frequency(bounds, cube) if low_frequency
                          else FreqIndexSet.full(bounds))
        self.gate = GateMlp(channels, rng, reduction, activation)

    def forward(self, X: Tensor) -> Tensor:
        return mfgc_forward(X, self)


def mfgc_forward(X: Tensor, block: MfgcBlock, gate_override=None) -> Tensor:
    """
    coeffs = DCT(X); M = gate(pool(coeffs)); выход = IDCT(M ⊙ coeffs)

    Гейт одного канала одинаков для всех его частот.

    Args:
        X: [C, D, H, W] или [B, C, D, H, W]
        block: Параметры блока
        gate_override: Фиксированный гейт [..., C] вместо вычисленного
    """
    coeffs = dct_forward(X, block.index_set)
    if gate_override is None:
        mask = freq_gate(freq_pool(coeffs), block.gate)
    else:
        mask = as_tensor(gate_override)
    values = coeffs.values
    gated = values * mask.reshape(mask.shape + (1,))
    return idct(FreqCoeffs(values=gated, index_set=block.index_set))
