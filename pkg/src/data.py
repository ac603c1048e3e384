"""
Синтетические фантомы сердца, предобработка и файловый формат объёмов
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import DimensionError, FormatError, ParameterError, SamplingError

logger = logging.getLogger(__name__)

N_CLASSES = 4
CLASS_NAMES = ('background', 'RV', 'Myo', 'LV')

MAGIC = b'MSV1'
VERSION = 1
_HEADER = struct.Struct('<4sIIII3fB')

Dims = Tuple[int, int, int]


@dataclass(eq=False)
class LabeledVolume:
    """
    Объём с разметкой

    image: [1, D, H, W] float32; labels: [D, H, W] uint8 или None;
    spacing: размер вокселя в мм (хранится с точностью float32)
    """
    image: np.ndarray
    labels: Optional[np.ndarray] = None
    spacing: Tuple[float, float, float] = (1.5, 1.5, 1.5)

    def __post_init__(self):
        self.image = np.ascontiguousarray(self.image, dtype=np.float32)
        if self.image.ndim == 3:
            self.image = self.image[None]
        if self.image.ndim != 4 or self.image.shape[0] != 1:
            raise DimensionError(f"Изображение должно иметь форму [1, D, H, W], получено {self.image.shape}")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
            if self.labels.shape != self.image.shape[1:]:
                raise DimensionError(f"Разметка {self.labels.shape} не совпадает с {self.image.shape[1:]}")
            if self.labels.size and self.labels.max() >= N_CLASSES:
                raise ParameterError(f"Метка {int(self.labels.max())} вне диапазона [0, {N_CLASSES})")
        self.spacing = tuple(float(np.float32(s)) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ParameterError(f"Шаг сетки должен быть тремя положительными числами: {self.spacing}")

    @property
    def dims(self) -> Dims:
        return tuple(self.image.shape[1:])

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def crop(self, start: Sequence[int], size: Sequence[int]) -> 'LabeledVolume':
        region = tuple(slice(s, s + n) for s, n in zip(start, size))
        labels = self.labels[region].copy() if self.labels is not None else None
        return LabeledVolume(image=self.image[(slice(None),) + region].copy(), labels=labels,
                             spacing=self.spacing)

    def equals(self, other: 'LabeledVolume') -> bool:
        """Побитовое равенство изображения, разметки и шага"""
        if self.spacing != other.spacing or self.has_labels != other.has_labels:
            return False
        if self.image.tobytes() != other.image.tobytes() or self.image.shape != other.image.shape:
            return False
        return not self.has_labels or self.labels.tobytes() == other.labels.tobytes()


# ---- фантом -------------------------------------------------------------

@dataclass
class PhantomSpec:
    """
    Параметры фантома: LV-эллипсоид внутри оболочки Myo, RV сбоку

    Радиусы LV и RV заданы долями размеров по каждой оси, толщина стенки -
    в вокселях, сдвиг центра - долей размера.
    """
    dims: Dims = (20, 80, 80)
    spacing: float = 1.5
    lv_radius: Tuple[float, float] = (0.14, 0.2)
    wall: Tuple[float, float] = (2.0, 2.5)
    rv_radius: Tuple[float, float] = (0.16, 0.22)
    center_jitter: float = 0.04
    intensities: Tuple[float, float, float, float] = (0.1, 0.7, 0.35, 0.85)
    noise: float = 0.08

    def validate(self) -> None:
        """
        Raises:
            ParameterError: Радиусы не помещаются в объём при любом seed
        """
        dims = np.asarray(self.dims, dtype=np.float64)
        if len(self.dims) != 3 or dims.min() < 3:
            raise ParameterError(f"Размеры фантома должны быть >= 3: {self.dims}")
        for name in ('lv_radius', 'wall', 'rv_radius'):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ParameterError(f"{name}: нужен диапазон 0 < lo <= hi, получено {(lo, hi)}")
        if self.noise < 0 or self.spacing <= 0 or self.center_jitter < 0:
            raise ParameterError("noise, spacing и center_jitter должны быть неотрицательными")
        if len(self.intensities) != N_CLASSES:
            raise ParameterError(f"Нужно {N_CLASSES} интенсивности, получено {len(self.intensities)}")
        if (self.lv_radius[0] * dims).min() < 1 or (self.rv_radius[0] * dims).min() < 1:
            raise ParameterError(f"Радиусы меньше вокселя для размеров {self.dims}")

        center = (dims - 1) / 2
        jitter = self.center_jitter * dims
        outer = self.lv_radius[1] * dims + self.wall[1]
        if np.any(center - jitter - outer < 1) or np.any(center + jitter + outer > dims - 2):
            raise ParameterError(f"Радиусы LV и Myo не помещаются в {self.dims}")
        rv_offset = outer[2] + 0.3 * self.rv_radius[1] * dims[2]
        if center[2] - jitter[2] - rv_offset < 0:
            raise ParameterError(f"Центр RV выходит за пределы {self.dims}")


def _ellipsoid(grid, center, radii) -> np.ndarray:
    return sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii)) <= 1.0


def generate_phantom(spec: PhantomSpec, seed: int) -> LabeledVolume:
    """
    Строит размеченный фантом: фон 0, RV 1, Myo 2, LV 3

    Myo замкнут вокруг LV: каждый не-LV сосед LV по 6-связности помечается Myo.
    Изображение - средняя интенсивность класса плюс гауссов шум, обрезанные в [0, 1].

    Raises:
        ParameterError: Радиусы не помещаются в объём
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    dims = np.asarray(spec.dims, dtype=np.float64)
    grid = np.ogrid[tuple(slice(0, int(n)) for n in spec.dims)]

    center = (dims - 1) / 2 + rng.uniform(-1, 1, size=3) * spec.center_jitter * dims
    lv_r = rng.uniform(*spec.lv_radius, size=3) * dims
    wall = rng.uniform(*spec.wall)
    rv_r = rng.uniform(*spec.rv_radius, size=3) * dims
    rv_center = center.copy()
    rv_center[2] -= lv_r[2] + wall + 0.3 * rv_r[2]

    lv = _ellipsoid(grid, center, lv_r)
    myo = _ellipsoid(grid, center, lv_r + wall) & ~lv
    myo |= ndimage.binary_dilation(lv, structure=ndimage.generate_binary_structure(3, 1)) & ~lv
    rv = _ellipsoid(grid, rv_center, rv_r) & ~myo & ~lv

    labels = np.zeros(spec.dims, dtype=np.uint8)
    labels[rv] = 1
    labels[myo] = 2
    labels[lv] = 3
    counts = np.bincount(labels.reshape(-1), minlength=N_CLASSES)
    if np.any(counts == 0):
        raise SamplingError(f"Пустой класс в фантоме (seed={seed}): {counts.tolist()}")

    means = np.asarray(spec.intensities, dtype=np.float64)[labels]
    image = np.clip(means + rng.normal(0.0, spec.noise, size=labels.shape), 0.0, 1.0)
    return LabeledVolume(image=image[None].astype(np.float32), labels=labels,
                         spacing=(spec.spacing,) * 3)


# ---- предобработка ------------------------------------------------------

def normalize_percentile(vol: np.ndarray, lo: float = 0.5, hi: float = 99.5) -> np.ndarray:
    """
    Линейно отображает lo-перцентиль в 0 и hi-перцентиль в 1, затем обрезает в [0, 1]

    Перцентили - линейная интерполяция между порядковыми статистиками.
    Вырожденный случай (значения перцентилей равны) даёт нули.

    Raises:
        ParameterError: Пустой или нечисловой объём
    """
    vol = np.asarray(vol, dtype=np.float64)
    if vol.size == 0:
        raise ParameterError("Нормализация пустого объёма")
    if not np.all(np.isfinite(vol)):
        raise ParameterError("Объём содержит NaN или бесконечность")
    if not 0 <= lo < hi <= 100:
        raise ParameterError(f"Нужно 0 <= lo < hi <= 100, получено {lo}, {hi}")
    p_lo, p_hi = np.percentile(vol, [lo, hi], method='linear')
    if p_hi <= p_lo:
        return np.zeros(vol.shape, dtype=np.float32)
    return np.clip((vol - p_lo) / (p_hi - p_lo), 0.0, 1.0).astype(np.float32)


def extract_patches(lv: LabeledVolume, size: Dims = (16, 64, 64), n: int = 1,
                    require_label: bool = True, seed: int = 0,
                    max_retries: int = 1000) -> List[LabeledVolume]:
    """
    Случайные вырезки заданного размера, целиком внутри объёма

    При size == dims возвращается единственный патч - весь объём.
    При require_label каждый патч содержит хотя бы один воксель переднего плана.

    Raises:
        ParameterError: size больше объёма
        SamplingError: Лимит попыток исчерпан
    """
    size = tuple(int(s) for s in size)
    dims = lv.dims
    if len(size) != 3 or min(size) < 1 or any(s > d for s, d in zip(size, dims)):
        raise ParameterError(f"Патч {size} не помещается в объём {dims}")
    if require_label and not lv.has_labels:
        raise ParameterError("require_label требует разметку")

    if size == dims:
        if require_label and not lv.labels.any():
            raise SamplingError("В объёме нет переднего плана")
        return [lv.crop((0, 0, 0), size)]

    rng = np.random.default_rng(seed)
    highs = [d - s + 1 for s, d in zip(size, dims)]
    patches = []
    for _ in range(n):
        for attempt in range(max_retries):
            start = [int(rng.integers(0, h)) for h in highs]
            patch = lv.crop(start, size)
            if not require_label or patch.labels.any():
                break
        else:
            raise SamplingError(f"Не удалось найти патч с разметкой за {max_retries} попыток")
        if attempt > max_retries // 2:
            logger.warning(f"Patch sampling needed {attempt + 1} retries (cap {max_retries})")
        patches.append(patch)
    return patches


def extract_slices(lv: LabeledVolume, size: Tuple[int, int] = (64, 64), n: int = 1,
                   require_label: bool = True, seed: int = 0) -> List[LabeledVolume]:
    """2D-патчи [1, 1, H, W] для двухветвевой модели"""
    return extract_patches(lv, (1,) + tuple(size), n, require_label, seed)


def crop_foreground(lv: LabeledVolume, margin: int = 0, threshold: float = 0.0) -> LabeledVolume:
    """Обрезка по ограничивающему параллелепипеду вокселей image > threshold (с отступом)"""
    mask = lv.image[0] > threshold
    boxes = ndimage.find_objects(mask.astype(np.int8))
    if not boxes or boxes[0] is None:
        return lv
    start = [max(b.start - margin, 0) for b in boxes[0]]
    stop = [min(b.stop + margin, d) for b, d in zip(boxes[0], lv.dims)]
    return lv.crop(start, [e - s for s, e in zip(start, stop)])


def split_cases(n: int, fractions: Tuple[float, float, float] = (0.7, 0.15, 0.15),
                seed: int = 0) -> Tuple[List[int], List[int], List[int]]:
    """
    Разбиение индексов случаев на train/val/test

    При n >= 3 каждая часть получает хотя бы один случай.
    """
    if n < 1:
        raise ParameterError(f"Нужен хотя бы один случай, получено {n}")
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-6:
        raise ParameterError(f"Доли должны быть неотрицательными и давать 1: {fractions}")
    order = np.random.default_rng(seed).permutation(n).tolist()
    n_val = int(round(n * fractions[1]))
    n_test = int(round(n * fractions[2]))
    if n >= 3:
        n_val, n_test = max(n_val, 1), max(n_test, 1)
    n_train = max(n - n_val - n_test, 0)
    return (sorted(order[:n_train]), sorted(order[n_train:n_train + n_val]),
            sorted(order[n_train + n_val:]))


def augment_flip_rot90(lv: LabeledVolume, rng: np.random.Generator) -> LabeledVolume:
    """Случайные отражения по H, W и поворот на k·90° в плоскости H-W"""
    image, labels = lv.image, lv.labels
    for axis in (-2, -1):
        if rng.random() < 0.5:
            image = np.flip(image, axis=axis)
            labels = np.flip(labels, axis=axis) if labels is not None else None
    k = int(rng.integers(0, 4))
    image = np.rot90(image, k, axes=(-2, -1))
    labels = np.rot90(labels, k, axes=(-2, -1)) if labels is not None else None
    return LabeledVolume(image=np.ascontiguousarray(image),
                         labels=np.ascontiguousarray(labels) if labels is not None else None,
                         spacing=lv.spacing)


# ---- файловый формат ----------------------------------------------------

def encode_volume(lv: LabeledVolume) -> bytes:
    depth, height, width = lv.dims
    header = _HEADER.pack(MAGIC, VERSION, depth, height, width, *lv.spacing, int(lv.has_labels))
    parts = [header, lv.image.astype('<f4').tobytes()]
    if lv.has_labels:
        parts.append(lv.labels.astype(np.uint8).tobytes())
    return b''.join(parts)


def decode_volume(raw: bytes) -> LabeledVolume:
    """
    Raises:
        FormatError: Неверный magic, версия, длина полезной нагрузки
    """
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FormatError("Неверная сигнатура файла объёма")
    if len(raw) < _HEADER.size:
        raise FormatError("Заголовок файла объёма обрезан")
    _, version, depth, height, width, sz, sy, sx, has_labels = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise FormatError(f"Неподдерживаемая версия файла объёма: {version}")
    if has_labels not in (0, 1):
        raise FormatError(f"Некорректный флаг разметки: {has_labels}")
    count = depth * height * width
    expected = _HEADER.size + 4 * count + (count if has_labels else 0)
    if len(raw) != expected:
        raise FormatError(f"Длина файла {len(raw)} байт не соответствует заголовку ({expected})")

    offset = _HEADER.size
    image = np.frombuffer(raw, dtype='<f4', count=count, offset=offset).reshape(1, depth, height, width)
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, dtype=np.uint8, count=count, offset=offset + 4 * count)
        labels = labels.reshape(depth, height, width)
    try:
        return LabeledVolume(image=image.astype(np.float32), labels=labels, spacing=(sz, sy, sx))
    except (DimensionError, ParameterError) as e:
        raise FormatError(f"Некорректное содержимое файла объёма: {e}") from e


def write_volume(path: str, lv: LabeledVolume) -> None:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(encode_volume(lv))


def read_volume(path: str) -> LabeledVolume:
    source = Path(path)
    if not source.is_file():
        raise FormatError(f"Файл объёма не найден: {path}")
    return decode_volume(source.read_bytes())


def read_directory(path: str) -> List[LabeledVolume]:
    """Все *.msv файлы каталога в порядке имён"""
    files = sorted(Path(path).glob('*.msv'))
    if not files:
        raise FormatError(f"В каталоге {path} нет файлов объёмов")
    return [read_volume(str(f)) for f in files]
