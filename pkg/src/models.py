"""
Сборка двух архитектур: двухветвевая модель (замороженная универсальная
ветвь + обучаемая Mamba-ветвь + CBA) и 3D-модель с TP-Mamba адаптерами
внутри замороженного ViT, а также декодеры и контроль заморозки
"""

import hashlib
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, replace
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .adapters import LocalPathKind, TpMambaAdapter, adapter_ratio, tokens_to_volume
from .config import MODEL_KINDS, ModelSettings
from .errors import DimensionError, ParameterError
from .fusion import CbaConfig, CrossBranchAttention, LoraLinear, VitBlock, cross_branch_attention, residual_fuse
from .mamba import CrossScan2d, MambaBlockConfig
from .nn import Conv3d, ConvTranspose3d, LayerNorm, Linear, Module, ModuleList, Parameter
from .tensor import Tensor, as_tensor, get_dtype

logger = logging.getLogger(__name__)


# ---- заморозка ----------------------------------------------------------

def param_hash(data: np.ndarray) -> str:
    """md5 от формы, типа и байтов массива"""
    digest = hashlib.md5()
    digest.update(str((data.shape, data.dtype.str)).encode('utf-8'))
    digest.update(np.ascontiguousarray(data).tobytes())
    return digest.hexdigest()


@dataclass
class FreezePolicy:
    """Замороженные параметры и снимок их хэшей на момент построения"""
    frozen: Tuple[str, ...]
    hashes: Dict[str, str]

    @classmethod
    def snapshot(cls, model: Module) -> 'FreezePolicy':
        frozen = tuple(name for name, p in model.named_parameters() if not p.requires_grad)
        params = dict(model.named_parameters())
        return cls(frozen=frozen, hashes={name: param_hash(params[name].data) for name in frozen})


@dataclass
class FreezeReport:
    results: Dict[str, bool]
    trainable: int
    total: int

    @property
    def frozen(self) -> int:
        return self.total - self.trainable

    @property
    def ratio(self) -> float:
        return self.trainable / self.total if self.total else 0.0

    @property
    def failed(self) -> List[str]:
        return [name for name, ok in self.results.items() if not ok]

    @property
    def all_passed(self) -> bool:
        return not self.failed


def assert_frozen(policy: FreezePolicy, model: Module) -> FreezeReport:
    """
    Сверяет замороженные параметры со снимком

    Returns:
        FreezeReport: pass/fail по каждому параметру и счётчики параметров
    """
    params = dict(model.named_parameters())
    results = {}
    for name in policy.frozen:
        param = params.get(name)
        results[name] = (
            param is not None
            and not param.requires_grad
            and param_hash(param.data) == policy.hashes[name]
        )
    report = FreezeReport(
        results=results,
        trainable=model.num_parameters(trainable_only=True),
        total=model.num_parameters(),
    )
    if report.failed:
        logger.warning(f"Frozen parameters changed: {report.failed[:5]}")
    return report


@contextmanager
def lora_bypassed(module: Module) -> Iterator[None]:
    """Временно отключает LoRA-добавки во всех LoraLinear модуля"""
    saved = [(layer, layer.lora) for _, layer in module.named_modules() if isinstance(layer, LoraLinear)]
    for layer, _ in saved:
        object.__setattr__(layer, 'lora', None)
    try:
        yield
    finally:
        for layer, lora in saved:
            object.__setattr__(layer, 'lora', lora)


# ---- кодировщики --------------------------------------------------------

def patchify(images: Tensor, patch: int) -> Tensor:
    """
    [N, C, H, W] -> [N, (H/p)·(W/p), C·p·p]

    Raises:
        DimensionError: H или W не делятся на patch
    """
    n, channels, height, width = images.shape
    if height % patch or width % patch:
        raise DimensionError(f"Размер {height}x{width} не делится на патч {patch}")
    gh, gw = height // patch, width // patch
    x = images.reshape(n, channels, gh, patch, gw, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(n, gh * gw, channels * patch * patch)


class PatchEmbed(Module):
    """Линейная проекция патчей плюс обучаемые позиционные эмбеддинги"""

    def __init__(self, in_channels: int, dim: int, patch: int, grid: int, rng: np.random.Generator):
        super().__init__()
        self.patch = patch
        self.grid = grid
        self.proj = Linear(in_channels * patch * patch, dim, rng)
        self.pos = Parameter(rng.normal(0.0, 0.02, size=(grid * grid, dim)).astype(get_dtype()))

    def forward(self, images: Tensor) -> Tensor:
        images = as_tensor(images)
        if images.ndim != 4:
            raise DimensionError(f"PatchEmbed ожидает [N, C, H, W], форма {images.shape}")
        tokens = patchify(images, self.patch)
        if tokens.shape[1] != self.grid * self.grid:
            raise DimensionError(
                f"Сетка {images.shape[-2] // self.patch}x{images.shape[-1] // self.patch} "
                f"не совпадает с {self.grid}x{self.grid}"
            )
        return self.proj(tokens) + self.pos


class GeneralistEncoder(Module):
    """Заглушка замороженного ViT-кодировщика: патчи + ViT-блоки"""

    def __init__(self, s: ModelSettings, rng: np.random.Generator):
        super().__init__()
        self.patch_embed = PatchEmbed(s.in_channels, s.sam_dim, s.patch, s.grid, rng)
        self.blocks = ModuleList([
            VitBlock(s.sam_dim, s.sam_heads, rng, s.mlp_ratio) for _ in range(s.sam_blocks)
        ])

    def run_blocks(self, tokens: Tensor, hooks=None) -> List[Tensor]:
        """
        Прогоняет токены через блоки

        Args:
            tokens: [..., L, dim]
            hooks: По паре (after_attention, after_mlp) на блок или None

        Returns:
            list: Выход каждого блока
        """
        outputs = []
        for i, block in enumerate(self.blocks):
            after_attention, after_mlp = hooks[i] if hooks is not None else (None, None)
            tokens = block(tokens, after_attention, after_mlp)
            outputs.append(tokens)
        return outputs

    def forward(self, images: Tensor) -> Tensor:
        return self.run_blocks(self.patch_embed(images))[-1]


class SpecialistEncoder(Module):
    """
    Обучаемая ветвь: патчи p/2 -> cross-scan -> слияние 2×2 -> cross-scan

    Выходная сетка совпадает с сеткой универсальной ветви.
    """

    def __init__(self, s: ModelSettings, rng: np.random.Generator):
        super().__init__()
        if s.patch < 2 or s.patch % 2:
            raise ParameterError(f"Специализированной ветви нужен чётный патч, получено {s.patch}")
        dim = s.mamba_dim
        self.stem_patch = s.patch // 2
        self.stem = Linear(s.in_channels * self.stem_patch ** 2, dim, rng)
        cfg = MambaBlockConfig(d_model=dim, d_state=s.d_state, expand=s.expand, d_conv=s.d_conv,
                               scan=s.scan, discretization=s.discretization)
        self.norm1 = LayerNorm(dim)
        self.stage1 = CrossScan2d(cfg, rng)
        self.merge_norm = LayerNorm(4 * dim)
        self.merge = Linear(4 * dim, dim, rng)
        self.norm2 = LayerNorm(dim)
        self.stage2 = CrossScan2d(cfg, rng)

    def forward(self, images: Tensor) -> Tensor:
        images = as_tensor(images)
        n, _, height, width = images.shape
        h, w = height // self.stem_patch, width // self.stem_patch
        if h % 2 or w % 2:
            raise DimensionError(f"Сетка {h}x{w} нельзя слить 2×2")

        x = self.stem(patchify(images, self.stem_patch)).reshape(n, h, w, -1)
        x = x + self.stage1(self.norm1(x))

        dim = x.shape[-1]
        x = x.reshape(n, h // 2, 2, w // 2, 2, dim).transpose(0, 1, 3, 2, 4, 5)
        x = self.merge(self.merge_norm(x.reshape(n, h // 2, w // 2, 4 * dim)))
        x = x + self.stage2(self.norm2(x))
        return x.reshape(n, (h // 2) * (w // 2), dim)


# ---- декодеры -----------------------------------------------------------

class Decoder(Module):
    """
    Стек conv_transpose (ядро и шаг (1, 2, 2)) + GELU, затем 1×1×1 свёртка в классы

    Глубина не меняется: 2D-карта декодируется как объём глубины 1.
    """

    def __init__(self, in_dim: int, n_classes: int, stages: int, rng: np.random.Generator,
                 min_channels: int = 8):
        super().__init__()
        if stages < 1:
            raise ParameterError(f"Нужна хотя бы одна ступень декодера, получено {stages}")
        self.in_dim = in_dim
        channels = [in_dim] + [max(in_dim // 2 ** (i + 1), min_channels) for i in range(stages)]
        self.ups = ModuleList([
            ConvTranspose3d(c_in, c_out, (1, 2, 2), rng, stride=(1, 2, 2))
            for c_in, c_out in zip(channels[:-1], channels[1:])
        ])
        self.head = Conv3d(channels[-1], n_classes, 1, rng)

    def forward(self, features: Tensor) -> Tensor:
        return decode_3d(self, features)


def decode_3d(decoder: Decoder, features: Tensor) -> Tensor:
    """[N, C, D, h, w] -> [N, K, D, h·2^s, w·2^s]"""
    features = as_tensor(features)
    if features.ndim != 5 or features.shape[1] != decoder.in_dim:
        raise DimensionError(f"Декодер ожидает [N, {decoder.in_dim}, D, h, w], форма {features.shape}")
    x = features
    for up in decoder.ups:
        x = up(x).gelu()
    return decoder.head(x)


def decode_2d(decoder: Decoder, features: Tensor) -> Tensor:
    """[N, C, h, w] -> [N, K, h·2^s, w·2^s]"""
    features = as_tensor(features)
    if features.ndim != 4:
        raise DimensionError(f"decode_2d ожидает [N, C, h, w], форма {features.shape}")
    n, c, h, w = features.shape
    logits = decode_3d(decoder, features.reshape(n, c, 1, h, w))
    return logits.reshape(n, logits.shape[1], logits.shape[3], logits.shape[4])


# ---- модели -------------------------------------------------------------

class DualBranchModel(Module):
    """Двухветвевая модель для 2D-срезов"""

    kind = 'dual_branch'

    def __init__(self, s: ModelSettings, rng: np.random.Generator):
        super().__init__()
        self.settings = s
        self.generalist = GeneralistEncoder(s, rng).freeze()
        fused_dim = s.neck_dim or s.sam_dim
        self.neck = Linear(s.sam_dim, s.neck_dim, rng) if s.neck_dim else None
        self.specialist = SpecialistEncoder(s, rng)
        self.cba = CrossBranchAttention(
            CbaConfig(d_mamba=s.mamba_dim, d_sam=fused_dim, heads=s.cba_heads, d_k=s.cba_dk, d_v=s.cba_dk),
            rng,
        )
        self.decoder = Decoder(fused_dim, s.n_classes, int(math.log2(s.patch)), rng)
        self.policy = FreezePolicy.snapshot(self)

    def forward(self, images: Tensor) -> Tensor:
        return dual_branch_forward(self, images)


def dual_branch_forward(m: DualBranchModel, images: Tensor) -> Tensor:
    """
    Срез [C, H, W] (или пакет [N, C, H, W]) -> логиты [.., K, H, W]

    Raises:
        DimensionError: H, W не делятся на патч или не совпадают с размером модели
    """
    images = as_tensor(images)
    batched = images.ndim == 4
    if images.ndim not in (3, 4):
        raise DimensionError(f"Ожидался срез [N,] C, H, W, форма {images.shape}")
    x = images if batched else images.reshape((1,) + images.shape)
    n, _, height, width = x.shape
    s = m.settings
    if height % s.patch or width % s.patch:
        raise DimensionError(f"Размер {height}x{width} не делится на патч {s.patch}")

    f_sam = m.generalist(x)
    if m.neck is not None:
        f_sam = m.neck(f_sam)
    f_mamba = m.specialist(x)
    fused = residual_fuse(f_sam, cross_branch_attention(f_mamba, f_sam, m.cba))

    gh, gw = height // s.patch, width // s.patch
    features = fused.reshape(n, gh, gw, fused.shape[-1]).transpose(0, 3, 1, 2)
    logits = decode_2d(m.decoder, features)
    return logits if batched else logits.reshape(logits.shape[1:])


class AdapterPair(Module):
    """Адаптеры после MSA и после MLP одного ViT-блока"""

    def __init__(self, s: ModelSettings, dims, rng: np.random.Generator):
        super().__init__()
        cfg = MambaBlockConfig(d_model=s.adapter_dim, d_state=s.adapter_d_state, expand=s.adapter_expand,
                               d_conv=s.d_conv, scan=s.scan, discretization=s.discretization)
        kind = LocalPathKind(s.local_path)
        self.attn = TpMambaAdapter(s.sam_dim, s.adapter_dim, dims, rng, kind, cfg,
                                   s.mfgc_reduction, s.low_frequency, s.adapter_share_planes)
        self.mlp = TpMambaAdapter(s.sam_dim, s.adapter_dim, dims, rng, kind, cfg,
                                  s.mfgc_reduction, s.low_frequency, s.adapter_share_planes)


class AdapterModel(Module):
    """
    Замороженный ViT с TP-Mamba адаптерами (и опционально LoRA на q/k/v)
    и 3D-декодером
    """

    def __init__(self, s: ModelSettings, rng: np.random.Generator):
        super().__init__()
        self.settings = s
        self.kind = s.kind
        self.dims = (s.volume_depth, s.grid, s.grid)
        self.generalist = GeneralistEncoder(s, rng).freeze()
        if s.lora_rank:
            alpha = s.lora_alpha or None
            for block in self.generalist.blocks:
                block.attach_lora(s.lora_rank, rng, alpha)
        self.adapters = ModuleList([AdapterPair(s, self.dims, rng) for _ in range(s.sam_blocks)])
        self.decoder = Decoder(s.sam_dim, s.n_classes, int(math.log2(s.patch)), rng)

        self.adapter_fraction = adapter_ratio(self.adapters[0].attn, self.generalist.blocks[0])
        if self.adapter_fraction > s.max_adapter_ratio:
            raise ParameterError(
                f"Адаптер занимает {self.adapter_fraction:.3f} параметров блока, "
                f"допустимо {s.max_adapter_ratio}"
            )
        logger.info(f"Adapter/block parameter ratio: {self.adapter_fraction:.4f}")
        self.policy = FreezePolicy.snapshot(self)

    def _hook(self, adapter: TpMambaAdapter):
        def apply(x: Tensor) -> Tensor:
            n, depth, length, dim = x.shape
            out = adapter(x.reshape(n, depth * length, dim), self.dims)
            return out.reshape(x.shape)
        return apply

    def encode(self, volume: Tensor, with_adapters: bool = True) -> Tensor:
        """
        Признаки кодировщика [N, D·h·w, dim] - сумма выходов двух последних блоков

        Внимание ViT работает внутри каждого среза, адаптеры видят весь объём.
        При with_adapters=False адаптеры и LoRA не используются.
        """
        volume = as_tensor(volume)
        if volume.ndim != 5:
            raise DimensionError(f"encode ожидает [N, C, D, H, W], форма {volume.shape}")
        n, channels, depth, height, width = volume.shape
        if depth != self.dims[0]:
            raise DimensionError(f"Глубина {depth} не совпадает с глубиной адаптеров {self.dims[0]}")

        slices = volume.transpose(0, 2, 1, 3, 4).reshape(n * depth, channels, height, width)
        tokens = self.generalist.patch_embed(slices)
        tokens = tokens.reshape(n, depth, tokens.shape[1], tokens.shape[2])

        if with_adapters:
            hooks = [(self._hook(pair.attn), self._hook(pair.mlp)) for pair in self.adapters]
            outputs = self.generalist.run_blocks(tokens, hooks)
        else:
            with lora_bypassed(self.generalist):
                outputs = self.generalist.run_blocks(tokens)

        aggregated = outputs[-1] + outputs[-2] if len(outputs) > 1 else outputs[-1]
        return aggregated.reshape(n, depth * aggregated.shape[2], aggregated.shape[3])

    def forward(self, volume: Tensor) -> Tensor:
        return adapter_model_forward(self, volume)


def adapter_model_forward(m: AdapterModel, volume: Tensor) -> Tensor:
    """Объём [C, D, H, W] (или [N, C, D, H, W]) -> логиты [.., K, D, H, W]"""
    volume = as_tensor(volume)
    if volume.ndim not in (4, 5):
        raise DimensionError(f"Ожидался объём [N,] C, D, H, W, форма {volume.shape}")
    batched = volume.ndim == 5
    x = volume if batched else volume.reshape((1,) + volume.shape)
    features = tokens_to_volume(m.encode(x), m.dims)
    logits = decode_3d(m.decoder, features)
    return logits if batched else logits.reshape(logits.shape[1:])


def build_model(kind: str, settings: Optional[ModelSettings] = None, seed: int = 0) -> Module:
    """
    Фабрика вариантов модели

    Args:
        kind: dual_branch | adapter_conv | adapter_mfgc | adapter_lora
        settings: Размеры модели (по умолчанию - пресет вида)
        seed: Seed инициализации

    Returns:
        DualBranchModel или AdapterModel со снимком FreezePolicy
    """
    if kind not in MODEL_KINDS:
        raise ParameterError(f"Неизвестный вид модели: {kind}")
    settings = replace(settings, kind=kind) if settings is not None else ModelSettings.for_kind(kind)
    rng = np.random.default_rng(seed)
    model = DualBranchModel(settings, rng) if kind == 'dual_branch' else AdapterModel(settings, rng)
    logger.info(
        f"Built {kind}: {model.num_parameters(trainable_only=True)} trainable / "
        f"{model.num_parameters()} total parameters"
    )
    return model


@dataclass
class ParamRow:
    name: str
    shape: Tuple[int, ...]
    count: int
    frozen: bool


def parameter_table(model: Module) -> List[ParamRow]:
    """Построчный учёт параметров модели"""
    return [
        ParamRow(name=name, shape=p.shape, count=p.size, frozen=not p.requires_grad)
        for name, p in model.named_parameters()
    ]
