"""
Параметры, модули и базовые слои поверх тензорного ядра
"""

import math
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionError, ParameterError
from .tensor import Tensor, concat, conv3d, conv_transpose3d, get_dtype, layer_norm


def kaiming_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int,
                    gain: float = 1.0) -> np.ndarray:
    """
    Равномерная инициализация с масштабом по fan-in

    Дисперсия весов gain^2 / fan_in.
    """
    bound = gain * math.sqrt(3.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=tuple(shape)).astype(get_dtype())


class Parameter(Tensor):
    """Обучаемый лист графа"""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """
    Базовый класс модуля

    Параметры и подмодули регистрируются через атрибуты в порядке
    присваивания; имена параметров строятся через точку (blocks.0.attn.q.weight).
    """

    def __init__(self):
        object.__setattr__(self, '_params', {})
        object.__setattr__(self, '_modules', {})

    def __setattr__(self, name: str, value) -> None:
        params = self.__dict__.get('_params')
        if params is None:
            raise RuntimeError(f"{type(self).__name__}: вызовите Module.__init__() до присваивания")
        if isinstance(value, Parameter):
            params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, Parameter]]:
        for name, param in self._params.items():
            yield prefix + name, param
        for name, module in self._modules.items():
            yield from module.named_parameters(prefix + name + '.')

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = '') -> Iterator[Tuple[str, 'Module']]:
        yield prefix.rstrip('.'), self
        for name, module in self._modules.items():
            yield from module.named_modules(prefix + name + '.')

    def freeze(self) -> 'Module':
        """Отключает градиенты у всех параметров модуля"""
        for param in self.parameters():
            param.requires_grad = False
        return self

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.grad = None

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(
            p.size for p in self.parameters()
            if p.requires_grad or not trainable_only
        )

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise DimensionError(
                f"Несовпадение параметров: нет {sorted(missing)}, лишние {sorted(unexpected)}"
            )
        for name, value in state.items():
            if own[name].shape != tuple(value.shape):
                raise DimensionError(f"{name}: форма {value.shape} != {own[name].shape}")
            own[name].data[...] = value


class ModuleList(Module):
    """Список подмодулей с именами 0, 1, 2, ..."""

    def __init__(self, modules: Sequence[Module] = ()):
        super().__init__()
        self._items: List[Module] = []
        for module in modules:
            self.append(module)

    def append(self, module: Module) -> None:
        self._modules[str(len(self._items))] = module
        self._items.append(module)

    def __getitem__(self, index: int) -> Module:
        return self._items[index]

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)


class Linear(Module):
    """y = x @ W + b, W хранится как [in, out]"""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False):
        super().__init__()
        if in_features < 1 or out_features < 1:
            raise ParameterError(f"Linear: размеры должны быть >= 1 ({in_features}, {out_features})")
        self.in_features = in_features
        self.out_features = out_features
        if zero_init:
            weight = np.zeros((in_features, out_features), dtype=get_dtype())
        else:
            weight = kaiming_uniform(rng, (in_features, out_features), in_features)
        self.weight = Parameter(weight)
        self.bias = Parameter(np.zeros(out_features, dtype=get_dtype())) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"Linear ожидает {self.in_features} признаков, получено {x.shape}")
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):

    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(dim, dtype=get_dtype()))
        self.bias = Parameter(np.zeros(dim, dtype=get_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias, self.eps)


class Conv3d(Module):
    """Обёртка над conv3d с обучаемым ядром [O, C, kD, kH, kW]"""

    def __init__(self, in_channels: int, out_channels: int, kernel_size, rng: np.random.Generator,
                 stride=1, padding=0, dilation=1, bias: bool = True, groups: int = 1):
        super().__init__()
        kernel = (kernel_size,) * 3 if isinstance(kernel_size, int) else tuple(kernel_size)
        if groups not in (1, in_channels) or (groups == in_channels and out_channels != in_channels):
            raise ParameterError(f"Поддерживаются groups=1 или depthwise, получено groups={groups}")
        self.groups = groups
        self.stride, self.padding, self.dilation = stride, padding, dilation
        per_group = 1 if groups == in_channels else in_channels
        fan_in = per_group * int(np.prod(kernel))
        self.weight = Parameter(kaiming_uniform(rng, (out_channels, per_group) + kernel, fan_in))
        self.bias = Parameter(np.zeros(out_channels, dtype=get_dtype())) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if self.groups == 1:
            return conv3d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)
        return depthwise_conv3d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class ConvTranspose3d(Module):
    """Обёртка над conv_transpose3d с ядром [Cin, Cout, kD, kH, kW]"""

    def __init__(self, in_channels: int, out_channels: int, kernel_size, rng: np.random.Generator,
                 stride=1, bias: bool = True):
        super().__init__()
        kernel = (kernel_size,) * 3 if isinstance(kernel_size, int) else tuple(kernel_size)
        self.stride = stride
        fan_in = in_channels * int(np.prod(kernel))
        self.weight = Parameter(kaiming_uniform(rng, (in_channels, out_channels) + kernel, fan_in))
        self.bias = Parameter(np.zeros(out_channels, dtype=get_dtype())) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv_transpose3d(x, self.weight, self.bias, self.stride)


def depthwise_conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride=1,
                     padding=0, dilation=1) -> Tensor:
    """
    Поканальная свёртка: каждый канал со своим ядром [C, 1, k, k, k]

    Реализована как conv3d над каналами, сложенными в пакетную ось.
    """
    batched = x.ndim == 5
    xs = x if batched else x.reshape((1,) + x.shape)
    n_batch, channels = xs.shape[:2]
    spatial = xs.shape[2:]
    per_channel = xs.reshape((n_batch * channels, 1) + spatial)

    outputs = []
    for c in range(channels):
        rows = per_channel[c::channels]
        outputs.append(conv3d(rows, weight[c:c + 1], None, stride, padding, dilation))
    out = concat(outputs, axis=1)
    if bias is not None:
        out = out + bias.reshape(1, channels, 1, 1, 1)
    return out if batched else out.reshape(out.shape[1:])
