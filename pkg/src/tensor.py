"""
Тензорное ядро - плотные массивы с обратным автоматическим дифференцированием

Каждая дифференцируемая операция создаёт новый Tensor и запоминает
родителей и функцию обратного прохода. GradTape восстанавливает порядок
выполнения операций и прогоняет его в обратную сторону.
"""

import contextlib
import itertools
import logging
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericError, ParameterError

logger = logging.getLogger(__name__)

# Глобальное состояние ядра: тип чисел для новых тензоров и запись графа
_STATE = {
    'dtype': np.float32,
    'grad_enabled': True,
}

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """
    Временно меняет тип чисел для всех создаваемых тензоров

    По умолчанию используется float32; float64 нужен для проверки
    градиентов конечными разностями.

    Args:
        dtype: np.float32 или np.float64
    """
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ParameterError(f"Неподдерживаемый тип: {dtype}")

    previous = _STATE['dtype']
    _STATE['dtype'] = dtype
    try:
        yield
    finally:
        _STATE['dtype'] = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Отключает запись графа (инференс, бенчмарки, конечные разности)"""
    previous = _STATE['grad_enabled']
    _STATE['grad_enabled'] = False
    try:
        yield
    finally:
        _STATE['grad_enabled'] = previous


def get_dtype():
    """Текущий тип чисел для новых тензоров"""
    return _STATE['dtype']


def is_grad_enabled() -> bool:
    return _STATE['grad_enabled']


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Сворачивает градиент обратно к форме операнда после трансляции"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _expand_reduced(grad: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    """Возвращает градиент редукции к исходной форме"""
    if axis is None:
        return np.broadcast_to(grad, shape)
    if not keepdims:
        grad = np.expand_dims(grad, axis)
    return np.broadcast_to(grad, shape)


class Tensor:
    """
    Плотный N-мерный массив с опциональным градиентом

    Данные хранятся в numpy-массиве текущего типа (row-major).
    Поле grad заполняется после backward() у листьев с requires_grad.
    """

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.asarray(data, dtype=get_dtype())
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = ''
        self._parents: Tuple['Tensor', ...] = ()
        self._backward: Optional[BackwardFn] = None

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence['Tensor'],
                backward: BackwardFn, op: str) -> 'Tensor':
        """
        Создаёт результат дифференцируемой операции

        Args:
            data: Результат прямого прохода
            parents: Входные тензоры операции
            backward: Функция grad_out -> градиенты по каждому родителю
            op: Имя операции (для отладки)

        Returns:
            Tensor: Результат, подключённый к графу если нужно
        """
        out = cls(data)
        if _STATE['grad_enabled'] and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out.op = op
        return out

    # ---- свойства -------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f"item() требует один элемент, форма {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> 'Tensor':
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Запускает обратный проход от этого тензора"""
        GradTape(self).backward(grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op='{self.op}')"

    # ---- арифметика -----------------------------------------------------

    def __add__(self, other) -> 'Tensor':
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor.from_op(
            self.data + other.data, (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
            'add'
        )

    def __radd__(self, other) -> 'Tensor':
        return as_tensor(other) + self

    def __sub__(self, other) -> 'Tensor':
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor.from_op(
            self.data - other.data, (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
            'sub'
        )

    def __rsub__(self, other) -> 'Tensor':
        return as_tensor(other) - self

    def __mul__(self, other) -> 'Tensor':
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor.from_op(
            a * b, (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
            'mul'
        )

    def __rmul__(self, other) -> 'Tensor':
        return as_tensor(other) * self

    def __truediv__(self, other) -> 'Tensor':
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor.from_op(
            a / b, (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
            'div'
        )

    def __rtruediv__(self, other) -> 'Tensor':
        return as_tensor(other) / self

    def __neg__(self) -> 'Tensor':
        return Tensor.from_op(-self.data, (self,), lambda g: (-g,), 'neg')

    def __pow__(self, power: float) -> 'Tensor':
        if isinstance(power, Tensor):
            raise ParameterError("Поддерживается только скалярная степень")
        a = self.data
        power = float(power)
        return Tensor.from_op(
            a ** power, (self,),
            lambda g: (g * power * a ** (power - 1.0),),
            'pow'
        )

    def __matmul__(self, other) -> 'Tensor':
        return matmul(self, other)

    def __getitem__(self, index) -> 'Tensor':
        shape = self.shape
        fancy = _is_fancy_index(index)

        def backward(g):
            full = np.zeros(shape, dtype=g.dtype)
            if fancy:
                np.add.at(full, index, g)
            else:
                full[index] += g
            return (full,)

        return Tensor.from_op(self.data[index], (self,), backward, 'getitem')

    # ---- форма ----------------------------------------------------------

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        try:
            data = self.data.reshape(shape)
        except ValueError as e:
            raise DimensionError(f"Нельзя привести {original} к {shape}") from e
        return Tensor.from_op(data, (self,), lambda g: (g.reshape(original),), 'reshape')

    def transpose(self, *axes) -> 'Tensor':
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor.from_op(
            np.transpose(self.data, axes), (self,),
            lambda g: (np.transpose(g, inverse),),
            'transpose'
        )

    def swapaxes(self, a: int, b: int) -> 'Tensor':
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))

    @property
    def T(self) -> 'Tensor':
        return self.swapaxes(-1, -2)

    def take(self, indices: np.ndarray, axis: int) -> 'Tensor':
        """Выборка по индексам вдоль оси (перестановки токенов)"""
        indices = np.asarray(indices, dtype=np.int64)
        axis = axis % self.ndim
        shape = self.shape

        def backward(g):
            full = np.zeros(shape, dtype=g.dtype)
            np.add.at(full, (slice(None),) * axis + (indices,), g)
            return (full,)

        return Tensor.from_op(np.take(self.data, indices, axis=axis), (self,), backward, 'take')

    def flip(self, axis: int) -> 'Tensor':
        index = [slice(None)] * self.ndim
        index[axis] = slice(None, None, -1)
        return self[tuple(index)]

    # ---- редукции -------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        shape = self.shape
        return Tensor.from_op(
            self.data.sum(axis=axis, keepdims=keepdims), (self,),
            lambda g: (_expand_reduced(g, shape, axis, keepdims),),
            'sum'
        )

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        if axis is None:
            count = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return self._extremum(np.max, axis, keepdims, 'max')

    def min(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return self._extremum(np.min, axis, keepdims, 'min')

    def _extremum(self, fn, axis, keepdims: bool, op: str) -> 'Tensor':
        a = self.data
        kept = fn(a, axis=axis, keepdims=True)
        mask = (a == kept)
        # ничьи делят градиент поровну
        share = mask / mask.sum(axis=axis, keepdims=True)
        out = kept if keepdims else fn(a, axis=axis, keepdims=False)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (g * share,)

        return Tensor.from_op(out, (self,), backward, op)

    # ---- поэлементные функции -------------------------------------------

    def exp(self) -> 'Tensor':
        out = np.exp(self.data)
        return Tensor.from_op(out, (self,), lambda g: (g * out,), 'exp')

    def log(self) -> 'Tensor':
        a = self.data
        return Tensor.from_op(np.log(a), (self,), lambda g: (g / a,), 'log')

    def sqrt(self) -> 'Tensor':
        return self ** 0.5

    def tanh(self) -> 'Tensor':
        out = np.tanh(self.data)
        return Tensor.from_op(out, (self,), lambda g: (g * (1.0 - out * out),), 'tanh')

    def sigmoid(self) -> 'Tensor':
        out = _sigmoid(self.data)
        return Tensor.from_op(out, (self,), lambda g: (g * out * (1.0 - out),), 'sigmoid')

    def relu(self) -> 'Tensor':
        a = self.data
        return Tensor.from_op(np.maximum(a, 0), (self,), lambda g: (g * (a > 0),), 'relu')

    def silu(self) -> 'Tensor':
        a = self.data
        s = _sigmoid(a)
        return Tensor.from_op(
            a * s, (self,),
            lambda g: (g * (s + a * s * (1.0 - s)),),
            'silu'
        )

    def gelu(self) -> 'Tensor':
        """GELU в tanh-аппроксимации"""
        a = self.data
        c = np.sqrt(2.0 / np.pi)
        inner = c * (a + 0.044715 * a ** 3)
        t = np.tanh(inner)
        out = 0.5 * a * (1.0 + t)

        def backward(g):
            d_inner = c * (1.0 + 3.0 * 0.044715 * a * a)
            return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * d_inner),)

        return Tensor.from_op(out, (self,), backward, 'gelu')

    def softplus(self) -> 'Tensor':
        a = self.data
        out = np.logaddexp(0.0, a).astype(a.dtype)
        return Tensor.from_op(out, (self,), lambda g: (g * _sigmoid(a),), 'softplus')

    def softmax(self) -> 'Tensor':
        return softmax_lastdim(self)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    positive = a >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-a[positive]))
    e = np.exp(a[~positive])
    out[~positive] = e / (1.0 + e)
    return out


def _is_fancy_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def as_tensor(value) -> Tensor:
    """Оборачивает число или массив в Tensor (без градиента)"""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class GradTape:
    """
    Упорядоченная запись выполненных дифференцируемых операций

    Строится от корня графа; прямой порядок в nodes совпадает с порядком
    выполнения операций (родители раньше потомков).
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: List[Tensor] = self._record(root)

    @staticmethod
    def _record(root: Tensor) -> List[Tensor]:
        order: List[Tensor] = []
        visited = set()
        stack = [(root, False)]

        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        return order

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> List[Tensor]:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """
        Прогоняет запись в обратном порядке

        Градиент каждого листа с requires_grad записывается ровно один раз
        за проход (с накоплением к уже имеющемуся grad).

        Args:
            grad: Градиент по корню; для скаляра по умолчанию 1
        """
        root = self.root
        if not root.requires_grad:
            return

        if grad is None:
            if root.size != 1:
                raise DimensionError(f"backward() без grad требует скаляр, форма {root.shape}")
            grad = np.ones_like(root.data)

        pending: Dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=root.dtype)}

        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue

            if node._backward is None:
                g = np.asarray(g, dtype=node.dtype)
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue

            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + parent_grad
                else:
                    pending[key] = parent_grad


# ---- функции ядра -------------------------------------------------------

def matmul(a, b) -> Tensor:
    """
    Матричное произведение (с пакетными ведущими осями)

    Args:
        a: Tensor [..., m, k]
        b: Tensor [..., k, n] или [k, n]

    Returns:
        Tensor: [..., m, n]
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul требует как минимум 2 оси: {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"Несовпадение внутренних размерностей: {a.shape} @ {b.shape}")

    a_data, b_data = a.data, b.data
    try:
        out = np.matmul(a_data, b_data)
    except ValueError as e:
        raise DimensionError(f"Несовместимые пакетные оси: {a.shape} @ {b.shape}") from e

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b_data, -1, -2))
        gb = np.matmul(np.swapaxes(a_data, -1, -2), g)
        return _unbroadcast(ga, a_data.shape), _unbroadcast(gb, b_data.shape)

    return Tensor.from_op(out, (a, b), backward, 'matmul')


def softmax_lastdim(x) -> Tensor:
    """
    Softmax по последней оси со сдвигом на максимум

    Raises:
        NumericError: Вход содержит NaN
    """
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax требует непустую последнюю ось, форма {x.shape}")
    if np.isnan(x.data).any():
        raise NumericError("NaN на входе softmax")

    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor.from_op(out, (x,), backward, 'softmax')


def log_softmax_lastdim(x) -> Tensor:
    """Логарифм softmax по последней оси (устойчивая форма)"""
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("NaN на входе log_softmax")

    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - log_norm
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return Tensor.from_op(out, (x,), backward, 'log_softmax')


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"Нельзя склеить формы {[t.shape for t in tensors]}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor.from_op(out, tensors, backward, 'concat')


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"Нельзя сложить в стопку формы {[t.shape for t in tensors]}") from e

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor.from_op(out, tensors, backward, 'stack')


def pad(x, widths: Sequence[Tuple[int, int]]) -> Tensor:
    """Дополнение нулями; widths как в np.pad"""
    x = as_tensor(x)
    widths = [tuple(w) for w in widths]
    if len(widths) != x.ndim:
        raise DimensionError(f"pad: {len(widths)} пар для {x.ndim} осей")
    index = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))
    return Tensor.from_op(np.pad(x.data, widths), (x,), lambda g: (g[index],), 'pad')


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Нормализация по последней оси с аффинными параметрами"""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + eps) ** 0.5 * weight + bias


# ---- свёртки ------------------------------------------------------------

def _triple(value, name: str) -> Tuple[int, int, int]:
    if isinstance(value, int):
        return (value, value, value)
    value = tuple(int(v) for v in value)
    if len(value) != 3:
        raise ParameterError(f"{name} должен содержать 3 значения, получено {value}")
    return value


def conv3d(x, weight, bias=None, stride=1, padding=0, dilation=1) -> Tensor:
    """
    Трёхмерная взаимная корреляция

    Args:
        x: Tensor [C, D, H, W] или [N, C, D, H, W]
        weight: Tensor [O, C, kD, kH, kW]
        bias: Tensor [O] или None
        stride, padding, dilation: int или тройка по осям (D, H, W)

    Returns:
        Tensor: [O, oD, oH, oW] (или с пакетной осью)

    Raises:
        DimensionError: Ядро больше входа с учётом отступов
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim not in (4, 5):
        raise DimensionError(f"conv3d ожидает 4 или 5 осей, форма {x.shape}")
    if weight.ndim != 5:
        raise DimensionError(f"Ядро conv3d должно иметь 5 осей, форма {weight.shape}")

    stride = _triple(stride, 'stride')
    padding = _triple(padding, 'padding')
    dilation = _triple(dilation, 'dilation')
    if min(stride) < 1 or min(dilation) < 1 or min(padding) < 0:
        raise ParameterError(f"Недопустимые stride={stride}, padding={padding}, dilation={dilation}")

    batched = x.ndim == 5
    xs = x.data if batched else x.data[None]
    n_batch, channels = xs.shape[:2]
    out_channels, in_channels = weight.shape[:2]
    kernel = weight.shape[2:]
    if in_channels != channels:
        raise DimensionError(f"Каналы входа {channels} != каналы ядра {in_channels}")

    xp = np.pad(xs, ((0, 0), (0, 0)) + tuple((p, p) for p in padding))
    extent = [(k - 1) * d + 1 for k, d in zip(kernel, dilation)]
    for axis in range(3):
        if extent[axis] > xp.shape[2 + axis]:
            raise DimensionError(
                f"Ядро {kernel} (dilation {dilation}) больше входа {xs.shape[2:]} с отступом {padding}"
            )

    windows = sliding_window_view(xp, extent, axis=(2, 3, 4))
    windows = windows[:, :, ::stride[0], ::stride[1], ::stride[2],
                      ::dilation[0], ::dilation[1], ::dilation[2]]
    out_sizes = windows.shape[2:5]
    w_data = weight.data
    out = np.tensordot(windows, w_data, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    out = np.ascontiguousarray(np.moveaxis(out, -1, 1))

    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, -1, 1, 1, 1)
        parents.append(bias)

    def backward(g):
        gs = g if batched else g[None]
        gw = np.moveaxis(np.tensordot(windows, gs, axes=([0, 2, 3, 4], [0, 2, 3, 4])), -1, 0)

        gxp = np.zeros_like(xp)
        for i, j, k in itertools.product(*(range(n) for n in kernel)):
            contrib = np.moveaxis(np.tensordot(gs, w_data[:, :, i, j, k], axes=([1], [0])), -1, 1)
            starts = (i * dilation[0], j * dilation[1], k * dilation[2])
            target = (slice(None), slice(None)) + tuple(
                slice(s, s + st * (n - 1) + 1, st)
                for s, st, n in zip(starts, stride, out_sizes)
            )
            gxp[target] += contrib

        crop = (slice(None), slice(None)) + tuple(
            slice(p, p + n) for p, n in zip(padding, xs.shape[2:])
        )
        gx = gxp[crop]
        grads = [gx if batched else gx[0], gw]
        if bias is not None:
            grads.append(gs.sum(axis=(0, 2, 3, 4)))
        return grads

    return Tensor.from_op(out if batched else out[0], parents, backward, 'conv3d')


def conv_transpose3d(x, weight, bias=None, stride=1) -> Tensor:
    """
    Транспонированная 3D свёртка (сопряжённая к conv3d с теми же параметрами)

    Размер выхода по оси: (in - 1) * stride + kernel.

    Args:
        x: Tensor [Cin, D, H, W] или [N, Cin, D, H, W]
        weight: Tensor [Cin, Cout, kD, kH, kW]
        bias: Tensor [Cout] или None
        stride: int или тройка

    Returns:
        Tensor: [Cout, D', H', W'] (или с пакетной осью)
    """
    x, weight = as_tensor(x), as_tensor(weight)
    stride = _triple(stride, 'stride')
    if min(stride) < 1:
        raise ParameterError(f"stride должен быть >= 1, получено {stride}")
    if x.ndim not in (4, 5):
        raise DimensionError(f"conv_transpose3d ожидает 4 или 5 осей, форма {x.shape}")
    if weight.ndim != 5 or weight.shape[0] != x.shape[-4]:
        raise DimensionError(f"Ядро {weight.shape} не подходит к входу {x.shape}")

    batched = x.ndim == 5
    xs = x.data if batched else x.data[None]
    n_batch, _, *sizes = xs.shape
    out_channels = weight.shape[1]
    kernel = weight.shape[2:]
    out_sizes = [(n - 1) * s + k for n, s, k in zip(sizes, stride, kernel)]
    w_data = weight.data

    def tap_slices(i, j, k):
        return (slice(None), slice(None)) + tuple(
            slice(t, t + s * (n - 1) + 1, s)
            for t, s, n in zip((i, j, k), stride, sizes)
        )

    taps = list(itertools.product(*(range(n) for n in kernel)))
    out = np.zeros((n_batch, out_channels) + tuple(out_sizes), dtype=xs.dtype)
    for i, j, k in taps:
        out[tap_slices(i, j, k)] += np.moveaxis(
            np.tensordot(xs, w_data[:, :, i, j, k], axes=([1], [0])), -1, 1
        )

    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data.reshape(1, -1, 1, 1, 1)
        parents.append(bias)

    def backward(g):
        gs = g if batched else g[None]
        gx = np.zeros_like(xs)
        gw = np.zeros_like(w_data)
        for i, j, k in taps:
            g_tap = gs[tap_slices(i, j, k)]
            gx += np.moveaxis(np.tensordot(g_tap, w_data[:, :, i, j, k], axes=([1], [1])), -1, 1)
            gw[:, :, i, j, k] = np.tensordot(xs, g_tap, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        grads = [gx if batched else gx[0], gw]
        if bias is not None:
            grads.append(gs.sum(axis=(0, 2, 3, 4)))
        return grads

    return Tensor.from_op(out if batched else out[0], parents, backward, 'conv_transpose3d')


# ---- проверка градиентов ------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-3,
               max_elements: Optional[int] = None, seed: int = 0) -> float:
    """
    Сравнивает градиент ленты с центральными конечными разностями

    Относительная ошибка считается поэлементно:
    |a - n| / max(|a|, |n|, floor), где floor = 1e-3 * max(1, max|n|).

    Args:
        f: Скалярная дифференцируемая функция
        x: Точка проверки
        eps: Шаг конечных разностей
        max_elements: Проверить только случайное подмножество элементов
        seed: Seed выбора подмножества

    Returns:
        float: Максимальная относительная ошибка

    Raises:
        NumericError: Нечисловые x или f(x)
    """
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("grad_check: вход содержит NaN или бесконечность")

    point = Tensor(x.data.copy(), requires_grad=True)
    out = f(point)
    if out.size != 1:
        raise DimensionError(f"grad_check требует скалярную функцию, форма {out.shape}")
    if not np.isfinite(out.data).all():
        raise NumericError("grad_check: f(x) не конечно")
    out.backward()
    analytic = point.grad if point.grad is not None else np.zeros_like(point.data)

    flat_count = x.size
    positions = np.arange(flat_count)
    if max_elements is not None and max_elements < flat_count:
        positions = np.random.default_rng(seed).choice(flat_count, size=max_elements, replace=False)

    numeric = np.zeros(len(positions), dtype=np.float64)
    base = x.data.reshape(-1)
    with no_grad():
        for n, pos in enumerate(positions):
            shifted = base.copy()
            shifted[pos] += eps
            f_plus = f(Tensor(shifted.reshape(x.shape))).item()
            shifted[pos] -= 2 * eps
            f_minus = f(Tensor(shifted.reshape(x.shape))).item()
            numeric[n] = (f_plus - f_minus) / (2 * eps)

    if not np.all(np.isfinite(numeric)):
        raise NumericError("grad_check: конечные разности не конечны")

    picked = analytic.reshape(-1)[positions].astype(np.float64)
    floor = 1e-3 * max(1.0, float(np.abs(numeric).max(initial=0.0)))
    denom = np.maximum(np.maximum(np.abs(picked), np.abs(numeric)), floor)
    return float(np.max(np.abs(picked - numeric) / denom, initial=0.0))
