"""
Блок Mamba и порядки обхода: cross-scan для 2D карт и три плоскости для 3D
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Union

import numpy as np

from .errors import DimensionError, ParameterError
from .nn import Linear, Module, ModuleList, Parameter, kaiming_uniform
from .ssm import METHODS, SelectiveInputs, selective_scan
from .tensor import Tensor, as_tensor, get_dtype, pad

logger = logging.getLogger(__name__)

SCAN_MODES = ('forward', 'bidirectional')


@dataclass
class MambaBlockConfig:
    """Настройки блока Mamba (desk-значения по умолчанию)"""
    d_model: int
    d_state: int = 8
    expand: int = 2
    d_conv: int = 4
    scan: str = 'forward'
    discretization: str = 'bilinear'
    dt_min: float = 0.01
    dt_max: float = 0.1

    def __post_init__(self):
        for name in ('d_model', 'd_state', 'expand', 'd_conv'):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} должен быть >= 1, получено {getattr(self, name)}")
        if self.scan not in SCAN_MODES:
            raise ParameterError(f"Неизвестный режим скана: {self.scan}")
        if self.discretization not in METHODS:
            raise ParameterError(f"Неизвестная дискретизация: {self.discretization}")
        if not 0 < self.dt_min <= self.dt_max:
            raise ParameterError(f"Нужно 0 < dt_min <= dt_max, получено {self.dt_min}, {self.dt_max}")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def dt_rank(self) -> int:
        return max(1, math.ceil(self.d_model / 16))


def causal_depthwise_conv1d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """
    Поканальная каузальная свёртка вдоль оси последовательности

    Args:
        x: [..., L, E]
        weight: [K, E]
        bias: [E]
    """
    width = weight.shape[0]
    length = x.shape[-2]
    widths = [(0, 0)] * (x.ndim - 2) + [(width - 1, 0), (0, 0)]
    padded = pad(x, widths)
    out = bias
    for k in range(width):
        out = out + padded[..., k:k + length, :] * weight[k]
    return out


class MambaBlock(Module):
    """
    Проекция -> каузальная свёртка -> селективный скан -> SiLU-гейт -> проекция

    Остаточная связь добавляется вызывающим кодом.
    """

    def __init__(self, cfg: MambaBlockConfig, rng: np.random.Generator, zero_init_out: bool = False):
        super().__init__()
        self.cfg = cfg
        inner, n_state, rank = cfg.d_inner, cfg.d_state, cfg.dt_rank

        self.in_proj = Linear(cfg.d_model, 2 * inner, rng, bias=False)
        self.conv_weight = Parameter(kaiming_uniform(rng, (cfg.d_conv, inner), cfg.d_conv))
        self.conv_bias = Parameter(np.zeros(inner, dtype=get_dtype()))
        self.x_proj = Linear(inner, rank + 2 * n_state, rng, bias=False)
        self.dt_proj = Linear(rank, inner, rng)

        # softplus(bias) попадает в [dt_min, dt_max]
        dt = np.exp(rng.uniform(np.log(cfg.dt_min), np.log(cfg.dt_max), size=inner))
        self.dt_proj.bias.data[...] = dt + np.log(-np.expm1(-dt))
        self.dt_proj.weight.data[...] *= rank ** -0.5

        a_init = np.tile(np.arange(1, n_state + 1, dtype=np.float64), (inner, 1))
        self.A_log = Parameter(np.log(a_init))
        self.D = Parameter(np.ones(inner, dtype=get_dtype()))
        self.out_proj = Linear(inner, cfg.d_model, rng, bias=False, zero_init=zero_init_out)

    def _mix(self, tokens: Tensor) -> Tensor:
        cfg = self.cfg
        inner, n_state, rank = cfg.d_inner, cfg.d_state, cfg.dt_rank

        xz = self.in_proj(tokens)
        value, gate = xz[..., :inner], xz[..., inner:]
        value = causal_depthwise_conv1d(value, self.conv_weight, self.conv_bias).silu()

        proj = self.x_proj(value)
        dt_in = proj[..., :rank]
        b_k = proj[..., rank:rank + n_state]
        c_k = proj[..., rank + n_state:]
        delta = self.dt_proj(dt_in).softplus()
        a = -self.A_log.exp()

        inputs = SelectiveInputs(delta=delta, B=b_k, C=c_k, A=a, D=self.D)
        y = selective_scan(inputs, value, cfg.discretization)
        return self.out_proj(y * gate.silu())

    def forward(self, tokens: Tensor) -> Tensor:
        tokens = as_tensor(tokens)
        if tokens.ndim < 2 or tokens.shape[-1] != self.cfg.d_model:
            raise DimensionError(f"Ожидались токены [..., L, {self.cfg.d_model}], форма {tokens.shape}")
        if self.cfg.scan == 'forward':
            return self._mix(tokens)
        backward = self._mix(tokens.flip(-2)).flip(-2)
        return (self._mix(tokens) + backward) * 0.5


def mamba_block_forward(block: MambaBlock, tokens: Tensor) -> Tensor:
    """Прямой проход блока: [..., L, d_model] -> [..., L, d_model]"""
    return block(tokens)


# ---- порядки обхода -----------------------------------------------------

@dataclass(eq=False)
class ScanOrder:
    """
    Перестановка токенов и её обратная

    perm[i] - индекс токена на i-й позиции последовательности.
    """
    name: str
    perm: np.ndarray
    inverse: np.ndarray

    @classmethod
    def from_permutation(cls, name: str, perm: Sequence[int]) -> 'ScanOrder':
        perm = np.asarray(perm, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(len(perm))):
            raise ParameterError(f"Порядок '{name}' не является перестановкой")
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(len(perm))
        return cls(name=name, perm=perm, inverse=inverse)

    def apply(self, tokens: Tensor, axis: int = -2) -> Tensor:
        return tokens.take(self.perm, axis)

    def restore(self, sequence: Tensor, axis: int = -2) -> Tensor:
        return sequence.take(self.inverse, axis)


def cross_scan_orders(height: int, width: int) -> List[ScanOrder]:
    """Четыре обхода карты H×W: по строкам и по столбцам, прямо и обратно"""
    if height < 1 or width < 1:
        raise DimensionError(f"Размер карты должен быть >= 1, получено {height}x{width}")
    rows = np.arange(height * width)
    cols = rows.reshape(height, width).T.reshape(-1)
    return [
        ScanOrder.from_permutation('row_fwd', rows),
        ScanOrder.from_permutation('row_rev', rows[::-1]),
        ScanOrder.from_permutation('col_fwd', cols),
        ScanOrder.from_permutation('col_rev', cols[::-1]),
    ]


def cross_scan_2d(featmap: Tensor, blocks: Union[MambaBlock, Sequence[MambaBlock]]) -> Tensor:
    """
    Cross-scan: четыре обхода, блок Mamba на каждом, обратная перестановка, среднее

    Args:
        featmap: [H, W, d] или [B, H, W, d]
        blocks: Один общий блок или по блоку на каждое направление

    Returns:
        Tensor: той же формы
    """
    featmap = as_tensor(featmap)
    if featmap.ndim not in (3, 4):
        raise DimensionError(f"Ожидалась карта [B,] H, W, d, форма {featmap.shape}")
    *lead, height, width, dim = featmap.shape
    orders = cross_scan_orders(height, width)
    if isinstance(blocks, MambaBlock):
        blocks = [blocks] * len(orders)
    if len(blocks) != len(orders):
        raise ParameterError(f"Нужно {len(orders)} блока, получено {len(blocks)}")

    tokens = featmap.reshape(tuple(lead) + (height * width, dim))
    merged = None
    for order, block in zip(orders, blocks):
        out = order.restore(block(order.apply(tokens)))
        merged = out if merged is None else merged + out
    return (merged * (1.0 / len(orders))).reshape(featmap.shape)


class CrossScan2d(Module):
    """Модуль cross-scan с общим или раздельными по направлениям блоками"""

    def __init__(self, cfg: MambaBlockConfig, rng: np.random.Generator, shared: bool = True):
        super().__init__()
        count = 1 if shared else 4
        self.blocks = ModuleList([MambaBlock(cfg, rng) for _ in range(count)])

    def forward(self, featmap: Tensor) -> Tensor:
        blocks = self.blocks[0] if len(self.blocks) == 1 else list(self.blocks)
        return cross_scan_2d(featmap, blocks)


# ---- три плоскости ------------------------------------------------------

PLANES = ('axial', 'coronal', 'sagittal')

# перестановка осей [B, C, D, H, W] -> [B, <ось срезов>, <оси последовательности>, C]
_PLANE_AXES = {
    'axial': (0, 2, 3, 4, 1),
    'coronal': (0, 4, 2, 3, 1),
    'sagittal': (0, 3, 2, 4, 1),
}


@dataclass(eq=False)
class TriPlaneSequences:
    """
    Последовательности трёх плоскостей объёма и сборщик обратно

    axial:    D последовательностей длины H·W
    coronal:  W последовательностей длины D·H
    sagittal: H последовательностей длины D·W
    (каждая - с пакетной осью B впереди, склеенной с осью срезов)
    """
    axial: Tensor
    coronal: Tensor
    sagittal: Tensor
    batch: int
    channels: int
    dims: tuple
    batched: bool

    def planes(self) -> Dict[str, Tensor]:
        return {'axial': self.axial, 'coronal': self.coronal, 'sagittal': self.sagittal}

    def _restore(self, plane: str, seq: Tensor) -> Tensor:
        depth, height, width = self.dims
        axes = _PLANE_AXES[plane]
        sizes = {2: depth, 3: height, 4: width}
        grid = (self.batch,) + tuple(sizes[a] for a in axes[1:4]) + (self.channels,)
        if seq.size != int(np.prod(grid)) or seq.shape[-1] != self.channels:
            raise DimensionError(f"Плоскость {plane}: форма {seq.shape} не собирается в {grid}")
        inverse = tuple(np.argsort(axes))
        return seq.reshape(grid).transpose(inverse)

    def assemble(self, axial: Tensor, coronal: Tensor, sagittal: Tensor) -> Tensor:
        """Раскладывает выходы плоскостей по вокселям и усредняет три плоскости"""
        total = (self._restore('axial', axial)
                 + self._restore('coronal', coronal)
                 + self._restore('sagittal', sagittal))
        volume = total * (1.0 / 3.0)
        return volume if self.batched else volume.reshape(volume.shape[1:])


def tri_plane_sequences(volume: Tensor) -> TriPlaneSequences:
    """
    Разворачивает объём [C, D, H, W] (или [B, C, D, H, W]) в три набора последовательностей
    """
    volume = as_tensor(volume)
    if volume.ndim not in (4, 5):
        raise DimensionError(f"Ожидался объём [B,] C, D, H, W, форма {volume.shape}")
    batched = volume.ndim == 5
    vol = volume if batched else volume.reshape((1,) + volume.shape)
    batch, channels, depth, height, width = vol.shape
    if min(depth, height, width) < 1:
        raise DimensionError(f"Пустой объём {vol.shape}")

    sequences = {}
    for plane, axes in _PLANE_AXES.items():
        moved = vol.transpose(axes)
        n_seq = moved.shape[1]
        length = moved.shape[2] * moved.shape[3]
        sequences[plane] = moved.reshape(batch * n_seq, length, channels)

    return TriPlaneSequences(
        axial=sequences['axial'], coronal=sequences['coronal'], sagittal=sequences['sagittal'],
        batch=batch, channels=channels, dims=(depth, height, width), batched=batched,
    )


class TriPlaneMamba(Module):
    """
    Глобальный путь: блок Mamba на плоскость (веса общие для срезов внутри
    плоскости). При shared=True один блок обслуживает все три плоскости.
    """

    def __init__(self, cfg: MambaBlockConfig, rng: np.random.Generator, shared: bool = False):
        super().__init__()
        count = 1 if shared else len(PLANES)
        self.blocks = ModuleList([MambaBlock(cfg, rng) for _ in range(count)])

    @property
    def shared(self) -> bool:
        return len(self.blocks) == 1

    def block_for(self, plane: str) -> MambaBlock:
        return self.blocks[0] if self.shared else self.blocks[PLANES.index(plane)]

    def forward(self, volume: Tensor) -> Tensor:
        seqs = tri_plane_sequences(volume)
        outputs = {
            plane: seq + self.block_for(plane)(seq)
            for plane, seq in seqs.planes().items()
        }
        return seqs.assemble(outputs['axial'], outputs['coronal'], outputs['sagittal'])
