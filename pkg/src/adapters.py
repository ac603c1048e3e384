"""
TP-Mamba адаптер: токены <-> псевдо-3D объём, локальный путь (свёртка или
MFGC) параллельно с глобальным трёхплоскостным Mamba, слияние и возврат
в пространство токенов
"""

import logging
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from .errors import DimensionError, ParameterError
from .mamba import MambaBlockConfig, TriPlaneMamba
from .mfgc import MfgcBlock
from .nn import Conv3d, Linear, Module
from .tensor import Tensor, as_tensor, concat

logger = logging.getLogger(__name__)

Dims = Tuple[int, int, int]


class LocalPathKind(str, Enum):
    """Вариант локального пути адаптера"""
    CONV = 'conv'
    MFGC = 'mfgc'


def _check_dims(dims: Dims) -> Dims:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise DimensionError(f"dims должны быть тремя положительными числами: {dims}")
    return dims


def tokens_to_volume(tokens: Tensor, dims: Dims) -> Tensor:
    """
    [..., D·H·W, C] -> [..., C, D, H, W]

    Индекс токена: d·(H·W) + h·W + w.

    Raises:
        DimensionError: Число токенов не равно D·H·W
    """
    tokens = as_tensor(tokens)
    depth, height, width = _check_dims(dims)
    if tokens.ndim < 2 or tokens.shape[-2] != depth * height * width:
        raise DimensionError(
            f"Число токенов {tokens.shape[-2] if tokens.ndim >= 2 else tokens.shape} "
            f"не равно {depth}*{height}*{width}"
        )
    lead = tokens.shape[:-2]
    channels = tokens.shape[-1]
    grid = tokens.reshape(lead + (depth, height, width, channels))
    n = len(lead)
    axes = tuple(range(n)) + (n + 3, n, n + 1, n + 2)
    return grid.transpose(axes)


def volume_to_tokens(volume: Tensor) -> Tensor:
    """[..., C, D, H, W] -> [..., D·H·W, C], обратное к tokens_to_volume"""
    volume = as_tensor(volume)
    if volume.ndim < 4:
        raise DimensionError(f"Ожидался объём [..., C, D, H, W], форма {volume.shape}")
    lead = volume.shape[:-4]
    channels, depth, height, width = volume.shape[-4:]
    n = len(lead)
    axes = tuple(range(n)) + (n + 1, n + 2, n + 3, n)
    return volume.transpose(axes).reshape(lead + (depth * height * width, channels))


class MultiScaleConv3d(Module):
    """Две поканальные свёртки 3×3×3 с dilation 1 и 2, выходы суммируются"""

    def __init__(self, channels: int, rng: np.random.Generator, dilations=(1, 2)):
        super().__init__()
        self.dilations = tuple(dilations)
        self.near = Conv3d(channels, channels, 3, rng, padding=self.dilations[0],
                           dilation=self.dilations[0], groups=channels)
        self.far = Conv3d(channels, channels, 3, rng, padding=self.dilations[1],
                          dilation=self.dilations[1], groups=channels)

    def forward(self, volume: Tensor) -> Tensor:
        return self.near(volume) + self.far(volume)


class TpMambaAdapter(Module):
    """
    Адаптер для вставки в замороженный ViT-блок

    down_proj -> объём -> {локальный путь, трёхплоскостной Mamba} -> concat ->
    1×1×1 свёртка -> токены -> up_proj. up_proj инициализирован нулями, поэтому
    свежий адаптер даёт ровно нулевую добавку.

    share_planes: один блок Mamba на все три плоскости (по умолчанию).
    """

    def __init__(self, d_sam: int, d_adapter: int, dims: Dims, rng: np.random.Generator,
                 local_kind: LocalPathKind = LocalPathKind.CONV,
                 mamba_cfg: Optional[MambaBlockConfig] = None,
                 mfgc_reduction: int = 4, low_frequency: bool = False,
                 share_planes: bool = True):
        super().__init__()
        if d_adapter < 1 or d_adapter > d_sam:
            raise ParameterError(f"D_adapter должен быть в [1, {d_sam}], получено {d_adapter}")
        self.d_sam = d_sam
        self.d_adapter = d_adapter
        self.dims = _check_dims(dims)
        self.local_kind = LocalPathKind(local_kind)

        self.down_proj = Linear(d_sam, d_adapter, rng)
        if self.local_kind is LocalPathKind.MFGC:
            self.local = MfgcBlock(d_adapter, self.dims, rng, reduction=mfgc_reduction,
                                   low_frequency=low_frequency)
        else:
            self.local = MultiScaleConv3d(d_adapter, rng)
        cfg = mamba_cfg or MambaBlockConfig(d_model=d_adapter, d_state=4, expand=1)
        if cfg.d_model != d_adapter:
            raise ParameterError(f"Mamba адаптера ожидает d_model={d_adapter}, получено {cfg.d_model}")
        self.global_path = TriPlaneMamba(cfg, rng, shared=share_planes)
        self.fuse = Conv3d(2 * d_adapter, d_adapter, 1, rng)
        self.up_proj = Linear(d_adapter, d_sam, rng, zero_init=True)

    def forward(self, tokens: Tensor, dims: Optional[Dims] = None) -> Tensor:
        return adapter_forward(self, tokens, dims or self.dims)


def adapter_forward(a: TpMambaAdapter, f_in: Tensor, dims: Dims) -> Tensor:
    """
    F_adapter для токенов F_in [..., D·H·W, D_sam]

    Вызывающий код добавляет результат к F_in.
    """
    f_in = as_tensor(f_in)
    if tuple(dims) != a.dims:
        raise DimensionError(f"Адаптер построен для {a.dims}, получено {tuple(dims)}")
    if f_in.shape[-1] != a.d_sam:
        raise DimensionError(f"Адаптер ожидает токены размерности {a.d_sam}, форма {f_in.shape}")

    lead = f_in.shape[:-2]
    tokens = f_in.reshape((-1,) + f_in.shape[-2:]) if len(lead) != 1 else f_in
    volume = tokens_to_volume(a.down_proj(tokens), dims)
    local = a.local(volume)
    global_ = a.global_path(volume)
    fused = a.fuse(concat([local, global_], axis=1)).gelu()
    out = a.up_proj(volume_to_tokens(fused))
    return out.reshape(f_in.shape[:-1] + (a.d_sam,))


def adapter_ratio(adapter: Module, block: Module) -> float:
    """
    Доля параметров адаптера относительно замороженных параметров блока

    Если в блоке нет замороженных параметров, берутся все.
    """
    frozen = sum(p.size for p in block.parameters() if not p.requires_grad)
    return adapter.num_parameters() / max(frozen or block.num_parameters(), 1)
