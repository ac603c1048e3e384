"""
Бинарный формат контрольных точек модели

Формат (little-endian):
    magic "MSCK" (4 байта); u32 version=1
    u16 длина + имя вида модели (utf-8)
    u32 число параметров; для каждого:
        u16 длина + имя, u8 ndim, u32 × ndim форма, u64 смещение в байтах
        от начала полезной нагрузки, u8 признак заморозки
    u32 число хэшей; для каждого: u16 длина + имя, 32 байта md5 (hex, ascii)
    полезная нагрузка: параметры подряд как f32
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .errors import FormatError
from .models import FreezePolicy
from .nn import Module

logger = logging.getLogger(__name__)

MAGIC = b'MSCK'
VERSION = 1


@dataclass
class Checkpoint:
    kind: str
    params: Dict[str, np.ndarray]
    frozen: Dict[str, bool]
    hashes: Dict[str, str]


def _pack_name(name: str) -> bytes:
    raw = name.encode('utf-8')
    return struct.pack('<H', len(raw)) + raw


def encode_checkpoint(model: Module) -> bytes:
    """Сериализует параметры и снимок заморозки; результат детерминирован"""
    kind = getattr(model, 'kind', type(model).__name__)
    policy: Optional[FreezePolicy] = getattr(model, 'policy', None)
    named = list(model.named_parameters())

    header = [MAGIC, struct.pack('<I', VERSION), _pack_name(kind), struct.pack('<I', len(named))]
    payload = []
    offset = 0
    for name, param in named:
        data = np.ascontiguousarray(param.data, dtype='<f4')
        header.append(_pack_name(name))
        header.append(struct.pack('<B', data.ndim))
        header.append(struct.pack(f'<{data.ndim}I', *data.shape))
        header.append(struct.pack('<QB', offset, 0 if param.requires_grad else 1))
        payload.append(data.tobytes())
        offset += data.nbytes

    hashes = policy.hashes if policy is not None else {}
    header.append(struct.pack('<I', len(hashes)))
    for name in sorted(hashes):
        header.append(_pack_name(name))
        header.append(hashes[name].encode('ascii'))
    return b''.join(header + payload)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.raw):
            raise FormatError("Контрольная точка обрезана")
        values = struct.unpack_from(fmt, self.raw, self.pos)
        self.pos += size
        return values

    def name(self) -> str:
        (length,) = self.take('<H')
        if self.pos + length > len(self.raw):
            raise FormatError("Контрольная точка обрезана")
        value = self.raw[self.pos:self.pos + length]
        self.pos += length
        try:
            return value.decode('utf-8')
        except UnicodeDecodeError as e:
            raise FormatError("Некорректное имя в таблице параметров") from e


def decode_checkpoint(raw: bytes) -> Checkpoint:
    """
    Raises:
        FormatError: Неверный magic, версия, обрезанные или лишние данные
    """
    if raw[:4] != MAGIC:
        raise FormatError("Неверная сигнатура контрольной точки")
    reader = _Reader(raw)
    reader.pos = 4
    (version,) = reader.take('<I')
    if version != VERSION:
        raise FormatError(f"Неподдерживаемая версия контрольной точки: {version}")
    kind = reader.name()
    (count,) = reader.take('<I')

    table = []
    for _ in range(count):
        name = reader.name()
        (ndim,) = reader.take('<B')
        shape = reader.take(f'<{ndim}I') if ndim else ()
        offset, frozen = reader.take('<QB')
        table.append((name, tuple(shape), offset, bool(frozen)))

    (n_hashes,) = reader.take('<I')
    hashes = {}
    for _ in range(n_hashes):
        name = reader.name()
        if reader.pos + 32 > len(raw):
            raise FormatError("Контрольная точка обрезана")
        hashes[name] = raw[reader.pos:reader.pos + 32].decode('ascii')
        reader.pos += 32

    payload = memoryview(raw)[reader.pos:]
    expected = sum(4 * int(np.prod(shape)) for _, shape, _, _ in table)
    if len(payload) != expected:
        raise FormatError(f"Полезная нагрузка {len(payload)} байт, ожидалось {expected}")

    params, frozen = {}, {}
    for name, shape, offset, is_frozen in table:
        nbytes = 4 * int(np.prod(shape))
        if offset + nbytes > len(payload):
            raise FormatError(f"Параметр {name} выходит за пределы файла")
        params[name] = np.frombuffer(payload[offset:offset + nbytes], dtype='<f4').reshape(shape).copy()
        frozen[name] = is_frozen
    return Checkpoint(kind=kind, params=params, frozen=frozen, hashes=hashes)


def save_checkpoint(model: Module, path: str) -> None:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(encode_checkpoint(model))
    logger.info(f"Saved checkpoint: {target}")


def load_checkpoint(path: str, model: Optional[Module] = None) -> Checkpoint:
    """
    Читает контрольную точку и, если передана модель, загружает в неё веса

    Снимок хэшей заморозки в файле должен совпадать со снимком модели.

    Raises:
        FormatError: Файл повреждён, другой вид модели или чужие замороженные веса
    """
    source = Path(path)
    if not source.is_file():
        raise FormatError(f"Контрольная точка не найдена: {path}")
    ckpt = decode_checkpoint(source.read_bytes())
    if model is None:
        return ckpt

    kind = getattr(model, 'kind', type(model).__name__)
    if ckpt.kind != kind:
        raise FormatError(f"Контрольная точка для {ckpt.kind}, модель {kind}")
    policy: Optional[FreezePolicy] = getattr(model, 'policy', None)
    if policy is not None and policy.hashes != ckpt.hashes:
        raise FormatError("Снимок замороженных весов не совпадает с моделью")
    model.load_state_dict(ckpt.params)
    return ckpt
