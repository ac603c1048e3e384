"""
Конфигурация запуска: секции настроек, пресеты моделей и загрузка INI-файла
"""

import configparser
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from typing_extensions import Literal

from .errors import ConfigError

logger = logging.getLogger(__name__)

ModelKind = Literal['dual_branch', 'adapter_conv', 'adapter_mfgc', 'adapter_lora']

MODEL_KINDS = ('dual_branch', 'adapter_conv', 'adapter_mfgc', 'adapter_lora')

# Настройки вариантов модели
MODEL_PRESETS: Dict[str, Dict[str, Any]] = {
    "dual_branch": {
        "local_path": "conv",
        "lora_rank": 0,
        "neck_dim": 0,
    },
    "adapter_conv": {
        "local_path": "conv",
        "lora_rank": 0,
    },
    "adapter_mfgc": {
        "local_path": "mfgc",
        "lora_rank": 0,
    },
    "adapter_lora": {
        "local_path": "conv",
        "lora_rank": 4,
    },
}


@dataclass
class ModelSettings:
    kind: str = 'adapter_mfgc'
    in_channels: int = 1
    n_classes: int = 4
    # замороженная универсальная ветвь
    sam_dim: int = 64
    sam_blocks: int = 4
    sam_heads: int = 4
    patch: int = 8
    mlp_ratio: int = 4
    image_size: int = 64
    # специализированная ветвь
    mamba_dim: int = 32
    d_state: int = 8
    expand: int = 2
    d_conv: int = 4
    scan: str = 'forward'
    discretization: str = 'bilinear'
    # слияние ветвей
    cba_heads: int = 4
    cba_dk: int = 16
    neck_dim: int = 0
    # адаптеры
    volume_depth: int = 16
    adapter_dim: int = 16
    adapter_d_state: int = 4
    adapter_expand: int = 1
    adapter_share_planes: bool = True
    local_path: str = 'mfgc'
    mfgc_reduction: int = 4
    low_frequency: bool = False
    lora_rank: int = 0
    lora_alpha: float = 0.0
    max_adapter_ratio: float = 0.10

    @classmethod
    def for_kind(cls, kind: str, **overrides) -> 'ModelSettings':
        if kind not in MODEL_PRESETS:
            raise ConfigError(f"Неизвестный вид модели: {kind}")
        values = {**MODEL_PRESETS[kind], **overrides, 'kind': kind}
        return cls(**values)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    def validate(self) -> list:
        errors = []
        if self.kind not in MODEL_KINDS:
            errors.append(f"model.kind: неизвестный вид '{self.kind}'")
        if self.patch < 2 or self.patch & (self.patch - 1):
            errors.append(f"model.patch: нужна степень двойки >= 2, получено {self.patch}")
        elif self.image_size % self.patch:
            errors.append(f"model.image_size {self.image_size} не делится на patch {self.patch}")
        elif self.kind == 'dual_branch' and self.grid % 2:
            errors.append("model: для dual_branch сетка патчей должна быть чётной")
        if self.sam_dim % self.sam_heads:
            errors.append(f"model.sam_dim {self.sam_dim} не делится на sam_heads {self.sam_heads}")
        if self.local_path not in ('conv', 'mfgc'):
            errors.append(f"model.local_path: ожидалось conv или mfgc, получено {self.local_path}")
        if not 1 <= self.adapter_dim <= self.sam_dim:
            errors.append(f"model.adapter_dim должен быть в [1, {self.sam_dim}]")
        if self.lora_rank < 0 or self.lora_rank > self.sam_dim:
            errors.append(f"model.lora_rank вне диапазона: {self.lora_rank}")
        if self.neck_dim < 0:
            errors.append("model.neck_dim не может быть отрицательным")
        if self.max_adapter_ratio <= 0:
            errors.append("model.max_adapter_ratio должен быть > 0")
        return errors


@dataclass
class DataSettings:
    data_dir: str = 'output/phantoms'
    cases: int = 24
    volume_dims: Tuple[int, int, int] = (20, 80, 80)
    spacing: float = 1.5
    noise: float = 0.08
    patch_size: Tuple[int, int, int] = (16, 64, 64)
    patches_per_case: int = 4
    slices_per_case: int = 8
    require_label: bool = True
    augment: bool = True
    crop_foreground: bool = True
    crop_margin: int = 2
    split: Tuple[float, float, float] = (0.7, 0.15, 0.15)

    def validate(self) -> list:
        errors = []
        if self.cases < 3:
            errors.append(f"data.cases должно быть >= 3, получено {self.cases}")
        if any(p > d for p, d in zip(self.patch_size, self.volume_dims)):
            errors.append(f"data.patch_size {self.patch_size} больше volume_dims {self.volume_dims}")
        if self.spacing <= 0:
            errors.append("data.spacing должен быть > 0")
        if self.crop_margin < 0:
            errors.append(f"data.crop_margin не может быть отрицательным: {self.crop_margin}")
        if abs(sum(self.split) - 1.0) > 1e-6 or min(self.split) < 0:
            errors.append(f"data.split должен быть неотрицательным и давать в сумме 1: {self.split}")
        return errors


@dataclass
class TrainSettings:
    base_lr: float = 2e-4
    warmup_steps: int = 10
    epochs: int = 5
    batch_size: int = 2
    clip_norm: float = 1.0
    weight_decay: float = 0.01

    def validate(self) -> list:
        errors = []
        if self.base_lr <= 0:
            errors.append("train.base_lr должен быть > 0")
        if self.epochs < 1 or self.batch_size < 1:
            errors.append("train.epochs и train.batch_size должны быть >= 1")
        if self.clip_norm <= 0:
            errors.append("train.clip_norm должен быть > 0")
        if self.warmup_steps < 0:
            errors.append("train.warmup_steps не может быть отрицательным")
        return errors


@dataclass
class BenchSettings:
    lengths: Tuple[int, ...] = (1024, 2048, 4096)
    d_model: int = 64
    repeats: int = 3

    def validate(self) -> list:
        errors = []
        if list(self.lengths) != sorted(self.lengths):
            errors.append(f"bench.lengths должны идти по возрастанию: {self.lengths}")
        if self.repeats < 3:
            errors.append("bench.repeats должен быть >= 3")
        return errors


@dataclass
class RunConfig:
    model: ModelSettings = field(default_factory=ModelSettings)
    data: DataSettings = field(default_factory=DataSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    bench: BenchSettings = field(default_factory=BenchSettings)
    seed: int = 0
    output_dir: str = 'output/runs'

    def validate(self) -> None:
        """
        Raises:
            ConfigError: Со списком всех найденных проблем
        """
        errors = (self.model.validate() + self.data.validate()
                  + self.train.validate() + self.bench.validate())
        if errors:
            raise ConfigError("; ".join(errors))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


SECTIONS = {
    'model': ModelSettings,
    'data': DataSettings,
    'train': TrainSettings,
    'bench': BenchSettings,
}
RUN_KEYS = ('seed', 'output_dir', 'kind')


def _coerce(raw: str, default: Any, key: str) -> Any:
    """Приводит строку к типу значения по умолчанию"""
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ('1', 'true', 'yes', 'on'):
                return True
            if lowered in ('0', 'false', 'no', 'off'):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [p.strip() for p in raw.split(',') if p.strip()]
            kind = float if any(isinstance(v, float) for v in default) else int
            return tuple(kind(p) for p in items)
        return raw
    except ValueError as e:
        raise ConfigError(f"{key}: некорректное значение '{raw}'") from e


def _apply(section_obj, values: Dict[str, str], section: str):
    defaults = {f.name: getattr(section_obj, f.name) for f in fields(section_obj)}
    updates = {}
    for key, raw in values.items():
        if key not in defaults:
            raise ConfigError(f"Неизвестный ключ [{section}] {key}")
        updates[key] = _coerce(raw, defaults[key], f"{section}.{key}")
    return replace(section_obj, **updates)


def load_config(path: Optional[str] = None, kind: Optional[str] = None) -> RunConfig:
    """
    Читает конфигурацию запуска

    Все ключи необязательны. Порядок применения: значения по умолчанию,
    пресет вида модели, файл, переменные окружения MAMBASAM_SEED и
    MAMBASAM_OUTPUT_DIR.

    Args:
        path: INI-файл с секциями [run], [model], [data], [train], [bench]
        kind: Вид модели (перекрывает файл)

    Raises:
        ConfigError: Файл не найден, неизвестная секция или ключ, неверное значение
    """
    parser = configparser.ConfigParser()
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config not found: {path}")
        try:
            parser.read(path, encoding='utf-8')
        except configparser.Error as e:
            raise ConfigError(f"Не удалось разобрать {path}: {e}") from e

    for section in parser.sections():
        if section != 'run' and section not in SECTIONS:
            raise ConfigError(f"Неизвестная секция [{section}]")

    run_values = dict(parser['run']) if parser.has_section('run') else {}
    unknown = set(run_values) - set(RUN_KEYS)
    if unknown:
        raise ConfigError(f"Неизвестный ключ [run] {sorted(unknown)[0]}")

    model_values = dict(parser['model']) if parser.has_section('model') else {}
    kind = kind or model_values.pop('kind', None) or run_values.get('kind') or ModelSettings.kind
    model_values.pop('kind', None)

    cfg = RunConfig(model=ModelSettings.for_kind(kind))
    cfg.model = _apply(cfg.model, model_values, 'model')
    for section in ('data', 'train', 'bench'):
        if parser.has_section(section):
            setattr(cfg, section, _apply(getattr(cfg, section), dict(parser[section]), section))

    if 'seed' in run_values:
        cfg.seed = _coerce(run_values['seed'], 0, 'run.seed')
    if 'output_dir' in run_values:
        cfg.output_dir = run_values['output_dir']

    env_seed = os.getenv('MAMBASAM_SEED')
    if env_seed:
        cfg.seed = _coerce(env_seed, 0, 'MAMBASAM_SEED')
    cfg.output_dir = os.getenv('MAMBASAM_OUTPUT_DIR', cfg.output_dir)

    cfg.validate()
    logger.debug(f"Loaded config kind={cfg.model.kind} seed={cfg.seed} from {path or 'defaults'}")
    return cfg
