"""
Слияние ветвей: Cross-Branch Attention, остаточное слияние, LoRA и
замороженный ViT-блок
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from .errors import DimensionError, ParameterError
from .nn import LayerNorm, Linear, Module, Parameter, kaiming_uniform
from .tensor import Tensor, as_tensor, get_dtype, softmax_lastdim

logger = logging.getLogger(__name__)

TokenHook = Callable[[Tensor], Tensor]


# ---- LoRA ---------------------------------------------------------------

class LoraPair(Module):
    """
    Низкоранговая добавка ΔW = down · up с масштабом α/r

    up инициализируется нулями, поэтому в начале обучения слой совпадает
    с замороженным.
    """

    def __init__(self, d_in: int, d_out: int, rank: int, rng: np.random.Generator,
                 alpha: Optional[float] = None):
        super().__init__()
        if rank < 1 or rank > min(d_in, d_out):
            raise ParameterError(f"Ранг LoRA должен быть в [1, {min(d_in, d_out)}], получено {rank}")
        self.rank = rank
        self.alpha = float(rank if alpha is None else alpha)
        self.down = Parameter(kaiming_uniform(rng, (d_in, rank), d_in))
        self.up = Parameter(np.zeros((rank, d_out), dtype=get_dtype()))

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta_weight(self) -> np.ndarray:
        return self.scale * (self.down.data @ self.up.data)


def lora_forward(x: Tensor, frozen_weight: Tensor, lora: Optional[LoraPair],
                 frozen_bias: Optional[Tensor] = None) -> Tensor:
    """
    y = x · W + (α/r) · x · down · up

    Args:
        x: [..., d_in]
        frozen_weight: [d_in, d_out] без градиента
        lora: Пара LoRA или None
        frozen_bias: [d_out] или None
    """
    if x.shape[-1] != frozen_weight.shape[0]:
        raise DimensionError(f"Вход {x.shape} не подходит к весу {frozen_weight.shape}")
    y = x @ frozen_weight
    if frozen_bias is not None:
        y = y + frozen_bias
    if lora is not None:
        if lora.down.shape[0] != frozen_weight.shape[0] or lora.up.shape[1] != frozen_weight.shape[1]:
            raise DimensionError("Размеры LoRA не совпадают с замороженным слоем")
        y = y + (x @ lora.down) @ lora.up * lora.scale
    return y


class LoraLinear(Module):
    """Линейный слой с опциональной LoRA-добавкой"""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        self.base = Linear(in_features, out_features, rng)
        self.lora: Optional[LoraPair] = None

    def attach_lora(self, rank: int, rng: np.random.Generator, alpha: Optional[float] = None) -> LoraPair:
        self.lora = LoraPair(self.base.in_features, self.base.out_features, rank, rng, alpha)
        return self.lora

    def forward(self, x: Tensor) -> Tensor:
        return lora_forward(x, self.base.weight, self.lora, self.base.bias)


# ---- внимание -----------------------------------------------------------

def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, length, dim = x.shape
    if dim % heads:
        raise DimensionError(f"Размерность {dim} не делится на {heads} голов")
    per_head = dim // heads
    x = x.reshape(tuple(lead) + (length, heads, per_head))
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return x.transpose(axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, heads, length, per_head = x.shape
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return x.transpose(axes).reshape(tuple(lead) + (length, heads * per_head))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tuple[Tensor, Tensor]:
    """
    softmax(Q Kᵀ / √d_k) V по головам

    Returns:
        (выход [..., L, h·d_v], веса внимания [..., h, L, L])
    """
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    d_k = qh.shape[-1]
    weights = softmax_lastdim(qh @ kh.swapaxes(-1, -2) * (1.0 / math.sqrt(d_k)))
    return _merge_heads(weights @ vh), weights


@dataclass
class CbaConfig:
    d_mamba: int
    d_sam: int
    heads: int = 4
    d_k: int = 16
    d_v: int = 16


class CrossBranchAttention(Module):
    """
    Запросы из специализированной ветви, ключи и значения - из замороженной

    W_q: D_mamba -> h·d_k, W_k: D_sam -> h·d_k, W_v: D_sam -> h·d_v,
    выходная проекция h·d_v -> D_sam.
    """

    def __init__(self, cfg: CbaConfig, rng: np.random.Generator):
        super().__init__()
        if cfg.heads < 1:
            raise ParameterError(f"Число голов должно быть >= 1, получено {cfg.heads}")
        self.cfg = cfg
        self.w_q = Linear(cfg.d_mamba, cfg.heads * cfg.d_k, rng, bias=False)
        self.w_k = Linear(cfg.d_sam, cfg.heads * cfg.d_k, rng, bias=False)
        self.w_v = Linear(cfg.d_sam, cfg.heads * cfg.d_v, rng, bias=False)
        self.w_o = Linear(cfg.heads * cfg.d_v, cfg.d_sam, rng)

    def forward(self, f_mamba: Tensor, f_sam: Tensor) -> Tensor:
        return cross_branch_attention(f_mamba, f_sam, self)


def cross_branch_attention(f_mamba: Tensor, f_sam: Tensor, w: CrossBranchAttention,
                           return_weights: bool = False):
    """
    F_cba = softmax((F_mamba W_q)(F_sam W_k)ᵀ / √d_k)(F_sam W_v), затем проекция в D_sam

    Args:
        f_mamba: [..., L, D_mamba]
        f_sam: [..., L, D_sam]
        w: Веса CBA
        return_weights: Вернуть также матрицу внимания

    Raises:
        DimensionError: Разное число токенов
    """
    f_mamba, f_sam = as_tensor(f_mamba), as_tensor(f_sam)
    if f_mamba.shape[:-1] != f_sam.shape[:-1]:
        raise DimensionError(f"Число токенов различается: {f_mamba.shape} vs {f_sam.shape}")
    out, weights = scaled_dot_attention(w.w_q(f_mamba), w.w_k(f_sam), w.w_v(f_sam), w.cfg.heads)
    out = w.w_o(out)
    return (out, weights) if return_weights else out


def residual_fuse(f_sam: Tensor, f_cba: Tensor) -> Tensor:
    """F_fused = F_sam + F_cba"""
    f_sam, f_cba = as_tensor(f_sam), as_tensor(f_cba)
    if f_sam.shape != f_cba.shape:
        raise DimensionError(f"Формы для слияния различаются: {f_sam.shape} vs {f_cba.shape}")
    return f_sam + f_cba


# ---- ViT-блок -----------------------------------------------------------

class VitBlock(Module):
    """
    Pre-norm блок: x + MSA(norm(x)), затем + MLP(norm(·))

    Позиционное кодирование внутри блока не используется.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        super().__init__()
        if dim % heads:
            raise ParameterError(f"dim={dim} не делится на heads={heads}")
        self.dim = dim
        self.heads = heads
        self.norm1 = LayerNorm(dim)
        self.q = LoraLinear(dim, dim, rng)
        self.k = LoraLinear(dim, dim, rng)
        self.v = LoraLinear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, mlp_ratio * dim, rng)
        self.fc2 = Linear(mlp_ratio * dim, dim, rng)

    def attach_lora(self, rank: int, rng: np.random.Generator, alpha: Optional[float] = None):
        return [self.q.attach_lora(rank, rng, alpha),
                self.k.attach_lora(rank, rng, alpha),
                self.v.attach_lora(rank, rng, alpha)]

    def attention(self, tokens: Tensor, return_weights: bool = False):
        h = self.norm1(tokens)
        out, weights = scaled_dot_attention(self.q(h), self.k(h), self.v(h), self.heads)
        out = self.proj(out)
        return (out, weights) if return_weights else out

    def mlp(self, tokens: Tensor) -> Tensor:
        return self.fc2(self.fc1(self.norm2(tokens)).gelu())

    def forward(self, tokens: Tensor, after_attention: Optional[TokenHook] = None,
                after_mlp: Optional[TokenHook] = None) -> Tensor:
        """
        Args:
            tokens: [..., L, dim]
            after_attention: Добавка к токенам после MSA (адаптер)
            after_mlp: Добавка к токенам после MLP (адаптер)
        """
        tokens = as_tensor(tokens)
        if tokens.shape[-1] != self.dim:
            raise DimensionError(f"ViT-блок ожидает размерность {self.dim}, форма {tokens.shape}")
        x = tokens + self.attention(tokens)
        if after_attention is not None:
            x = x + after_attention(x)
        x = x + self.mlp(x)
        if after_mlp is not None:
            x = x + after_mlp(x)
        return x


def vit_block_forward(w: VitBlock, tokens: Tensor) -> Tensor:
    return w(tokens)
