"""
Модели пространства состояний: дискретизация, последовательный и
параллельный проходы, селективный скан

Непрерывная модель h' = A h + B x, y = C h + D x переводится в дискретную
h_k = Ā h_{k-1} + B̄ x_k, y_k = C̄ h_k + D̄ x_k. В селективном варианте
Δ, B и C зависят от шага.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from scipy.linalg import expm
from typing_extensions import Literal

from .errors import DimensionError, NumericError, ParameterError, SingularityError
from .tensor import Tensor, as_tensor

logger = logging.getLogger(__name__)

Method = Literal['bilinear', 'zoh']
METHODS = ('bilinear', 'zoh')

# Порог обусловленности, после которого матрица считается вырожденной
_SINGULAR_COND = 1e12
# Ниже этого |ΔA| для zoh используется ряд вместо деления
_SERIES_THRESHOLD = 1e-6


@dataclass
class SsmParams:
    """
    Параметры непрерывной модели

    A хранится диагональю длины N (по умолчанию) или плотной матрицей N×N.
    """
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    delta: float

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.atleast_2d(np.asarray(self.B, dtype=np.float64))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=np.float64))
        self.D = np.atleast_2d(np.asarray(self.D, dtype=np.float64))
        if self.A.ndim == 0:
            self.A = self.A.reshape(1)

        n = self.state_size
        if n < 1:
            raise ParameterError("Размер состояния N должен быть >= 1")
        if self.A.ndim == 2 and self.A.shape != (n, n):
            raise DimensionError(f"Плотная A должна быть {n}x{n}, получено {self.A.shape}")
        if self.A.ndim > 2:
            raise DimensionError(f"A должна быть диагональю или матрицей, форма {self.A.shape}")
        if self.B.shape[0] != n:
            raise DimensionError(f"B должна иметь {n} строк, форма {self.B.shape}")
        if self.C.shape[1] != n:
            raise DimensionError(f"C должна иметь {n} столбцов, форма {self.C.shape}")
        if self.D.shape != (self.C.shape[0], self.B.shape[1]):
            raise DimensionError(f"D должна быть {self.C.shape[0]}x{self.B.shape[1]}, форма {self.D.shape}")
        if not self.delta > 0:
            raise ParameterError(f"Δ должна быть > 0, получено {self.delta}")

    @property
    def state_size(self) -> int:
        return self.A.shape[0]

    @property
    def diagonal(self) -> bool:
        return self.A.ndim == 1


@dataclass
class DiscreteSsm:
    """Дискретная модель: Ā, B̄, C̄ = C, D̄ = D"""
    A_bar: np.ndarray
    B_bar: np.ndarray
    C_bar: np.ndarray
    D_bar: np.ndarray
    method: str

    @property
    def diagonal(self) -> bool:
        return self.A_bar.ndim == 1

    @property
    def state_size(self) -> int:
        return self.A_bar.shape[0]


@dataclass
class SelectiveInputs:
    """
    Пошаговые параметры селективного скана

    Формы (ведущие пакетные оси допустимы):
        delta: [..., L, E] (после softplus, > 0)
        B, C:  [..., L, N]
        A:     [E, N] диагональ на канал (отрицательная)
        D:     [E] пропуск
    """
    delta: Union[Tensor, np.ndarray]
    B: Union[Tensor, np.ndarray]
    C: Union[Tensor, np.ndarray]
    A: Union[Tensor, np.ndarray]
    D: Union[Tensor, np.ndarray]

    def validate(self, x_shape: Tuple[int, ...]) -> None:
        delta, B, C, A, D = (as_tensor(v) for v in (self.delta, self.B, self.C, self.A, self.D))
        length, channels = x_shape[-2], x_shape[-1]
        n_state = A.shape[-1]
        if delta.shape != tuple(x_shape):
            raise DimensionError(f"delta {delta.shape} не совпадает с x {x_shape}")
        if B.shape != tuple(x_shape[:-1]) + (n_state,) or C.shape != B.shape:
            raise DimensionError(f"B {B.shape}, C {C.shape}: ожидалось {x_shape[:-1] + (n_state,)}")
        if A.shape != (channels, n_state) or D.shape != (channels,):
            raise DimensionError(f"A {A.shape}, D {D.shape} не подходят к {channels} каналам")
        if length < 0:
            raise DimensionError("Отрицательная длина последовательности")


# ---- дискретизация ------------------------------------------------------

def _phi1_series(z: np.ndarray, terms: int = 30) -> np.ndarray:
    """Σ z^k / (k+1)! - то же, что (e^z - I) / z, без деления"""
    identity = np.eye(z.shape[0])
    total = identity.copy()
    power = identity.copy()
    for k in range(1, terms):
        power = power @ z
        total = total + power / math.factorial(k + 1)
    return total


def discretize(p: SsmParams, method: str = 'bilinear') -> DiscreteSsm:
    """
    Переводит непрерывную модель в дискретную

    bilinear: Ā = (I - Δ/2 A)^-1 (I + Δ/2 A), B̄ = (I - Δ/2 A)^-1 Δ B
    zoh:      Ā = exp(ΔA), B̄ = (ΔA)^-1 (exp(ΔA) - I) Δ B

    Args:
        p: Непрерывные параметры
        method: 'bilinear' | 'zoh'

    Returns:
        DiscreteSsm

    Raises:
        SingularityError: (I - Δ/2 A) необратима
    """
    if method not in METHODS:
        raise ParameterError(f"Неизвестный метод дискретизации: {method}")

    delta = float(p.delta)
    if p.diagonal:
        z = delta * p.A
        if method == 'bilinear':
            denom = 1.0 - z / 2.0
            if np.any(np.abs(denom) < 1e-12):
                raise SingularityError("(I - Δ/2 A) вырождена")
            a_bar = (1.0 + z / 2.0) / denom
            b_bar = (delta / denom)[:, None] * p.B
        else:
            a_bar = np.exp(z)
            small = np.abs(z) < _SERIES_THRESHOLD
            safe_z = np.where(small, 1.0, z)
            phi = np.where(small, 1.0 + z / 2.0 + z * z / 6.0, np.expm1(z) / safe_z)
            b_bar = (delta * phi)[:, None] * p.B
    else:
        n = p.state_size
        identity = np.eye(n)
        z = delta * p.A
        if method == 'bilinear':
            left = identity - z / 2.0
            if np.linalg.cond(left) > _SINGULAR_COND:
                raise SingularityError("(I - Δ/2 A) вырождена")
            a_bar = np.linalg.solve(left, identity + z / 2.0)
            b_bar = np.linalg.solve(left, delta * p.B)
        else:
            a_bar = expm(z)
            if np.linalg.cond(z) < 1e8:
                phi = np.linalg.solve(z, a_bar - identity)
            else:
                phi = _phi1_series(z)
            b_bar = phi @ (delta * p.B)

    return DiscreteSsm(A_bar=a_bar, B_bar=b_bar, C_bar=p.C.copy(), D_bar=p.D.copy(), method=method)


# ---- классические проходы -----------------------------------------------

def _check_sequence(d: DiscreteSsm, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[1] != d.B_bar.shape[1]:
        raise DimensionError(f"x должен быть L×{d.B_bar.shape[1]}, форма {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("x содержит NaN или бесконечность")
    return x


def scan_sequential(d: DiscreteSsm, x: np.ndarray,
                    h0: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Точная рекуррентность h_k = Ā h_{k-1} + B̄ x_k, y_k = C̄ h_k + D̄ x_k

    Args:
        d: Дискретная модель
        x: Вход L×D
        h0: Начальное состояние (нули по умолчанию)

    Returns:
        (y: L×M, h_final: N)
    """
    x = _check_sequence(d, x)
    n = d.state_size
    h = np.zeros(n) if h0 is None else np.asarray(h0, dtype=np.float64).copy()
    if h.shape != (n,):
        raise DimensionError(f"h0 должно иметь форму ({n},), получено {h.shape}")

    length = x.shape[0]
    y = np.zeros((length, d.C_bar.shape[0]))
    for k in range(length):
        drive = d.B_bar @ x[k]
        h = d.A_bar * h + drive if d.diagonal else d.A_bar @ h + drive
        y[k] = d.C_bar @ h + d.D_bar @ x[k]
    return y, h


def _parallel_recurrence(a: np.ndarray, b: np.ndarray, h0: np.ndarray,
                         dense: bool = False) -> np.ndarray:
    """
    Префиксный скан по оси 0 для пар (a, b)

    Комбинация (a1, b1)∘(a2, b2) = (a2 a1, a2 b1 + b2) ассоциативна, поэтому
    за log2(L) удвоений каждый элемент накапливает весь свой префикс.
    В плотном режиме a имеет форму [L, N, N], b - [L, N].
    """
    length = a.shape[0]
    if length == 0:
        return b.copy()

    a = a.copy()
    b = b.copy()
    if dense:
        b[0] = b[0] + a[0] @ h0
    else:
        b[0] = b[0] + a[0] * h0

    offset = 1
    while offset < length:
        if dense:
            b_next = b.copy()
            b_next[offset:] = np.einsum('lij,lj->li', a[offset:], b[:-offset]) + b[offset:]
            a_next = a.copy()
            a_next[offset:] = np.matmul(a[offset:], a[:-offset])
        else:
            b_next = b.copy()
            b_next[offset:] = a[offset:] * b[:-offset] + b[offset:]
            a_next = a.copy()
            a_next[offset:] = a[offset:] * a[:-offset]
        a, b = a_next, b_next
        offset *= 2
    return b


def scan_parallel(d: Union[DiscreteSsm, SelectiveInputs], x: np.ndarray,
                  h0: Optional[np.ndarray] = None, method: str = 'bilinear') -> np.ndarray:
    """
    Тот же результат, что и последовательный проход, через префиксный скан

    Args:
        d: DiscreteSsm (фиксированные параметры) или SelectiveInputs
        x: Вход L×D (или [..., L, E] для селективного случая)
        h0: Начальное состояние
        method: Дискретизация для SelectiveInputs

    Returns:
        np.ndarray: y
    """
    if isinstance(d, SelectiveInputs):
        return _selective_parallel(d, np.asarray(x, dtype=np.float64), h0, method)

    x = _check_sequence(d, x)
    n = d.state_size
    length = x.shape[0]
    h0 = np.zeros(n) if h0 is None else np.asarray(h0, dtype=np.float64)

    b = x @ d.B_bar.T
    if d.diagonal:
        a = np.broadcast_to(d.A_bar, (length, n))
        h = _parallel_recurrence(a, b, h0)
    else:
        a = np.broadcast_to(d.A_bar, (length, n, n))
        h = _parallel_recurrence(a, b, h0, dense=True)
    return h @ d.C_bar.T + x @ d.D_bar.T


# ---- селективный скан ---------------------------------------------------

def _selective_coefficients_np(delta: np.ndarray, A: np.ndarray, method: str):
    z = delta[..., None] * A
    if method == 'bilinear':
        denom = 1.0 - z / 2.0
        return (1.0 + z / 2.0) / denom, delta[..., None] / denom
    a = np.exp(z)
    small = np.abs(z) < _SERIES_THRESHOLD
    safe_z = np.where(small, 1.0, z)
    phi = np.where(small, 1.0 + z / 2.0 + z * z / 6.0, np.expm1(z) / safe_z)
    return a, delta[..., None] * phi


def _selective_parallel(s: SelectiveInputs, x: np.ndarray, h0, method: str) -> np.ndarray:
    s.validate(x.shape)
    delta, B, C, A, D = (np.asarray(as_tensor(v).data, dtype=np.float64)
                         for v in (s.delta, s.B, s.C, s.A, s.D))
    a, bcoef = _selective_coefficients_np(delta, A, method)
    u = bcoef * B[..., None, :] * x[..., None]

    a_t = np.moveaxis(a, -3, 0)
    u_t = np.moveaxis(u, -3, 0)
    start = np.zeros(a_t.shape[1:]) if h0 is None else np.asarray(h0, dtype=np.float64)
    h = np.moveaxis(_parallel_recurrence(a_t, u_t, start), 0, -3)
    return (h * C[..., None, :]).sum(axis=-1) + x * D


def selective_scan_naive(s: SelectiveInputs, x: np.ndarray, method: str = 'bilinear') -> np.ndarray:
    """
    Эталонный пошаговый проход для одной последовательности x: L×E

    Ā_k, B̄_k для всех шагов и каналов считаются сразу (диагональная ветка
    discretize() с шагом Δ_k), рекуррентность идёт обычным циклом по k.
    """
    if method not in METHODS:
        raise ParameterError(f"Неизвестный метод дискретизации: {method}")
    x = np.asarray(x, dtype=np.float64)
    s.validate(x.shape)
    delta, B, C, A, D = (np.asarray(as_tensor(v).data, dtype=np.float64)
                         for v in (s.delta, s.B, s.C, s.A, s.D))
    a_bar, b_scale = _selective_coefficients_np(delta, A, method)
    length, channels = x.shape
    h = np.zeros((channels, A.shape[1]))
    y = np.empty_like(x)
    for k in range(length):
        h = a_bar[k] * h + b_scale[k] * B[k] * x[k][:, None]
        y[k] = h @ C[k] + D * x[k]
    return y


def _sequential_recurrence(a: np.ndarray, u: np.ndarray, h0: np.ndarray) -> np.ndarray:
    h = np.empty(np.broadcast_shapes(a.shape, u.shape), dtype=u.dtype)
    state = h0
    for k in range(h.shape[0]):
        state = a[k] * state + u[k]
        h[k] = state
    return h


def linear_recurrence(a: Tensor, u: Tensor, h0: Optional[Tensor] = None, axis: int = 0) -> Tensor:
    """
    Дифференцируемая рекуррентность h_k = a_k ⊙ h_{k-1} + u_k вдоль оси

    Обратный проход - та же рекуррентность в обратном времени:
    λ_k = g_k + a_{k+1} ⊙ λ_{k+1}, ∂u_k = λ_k, ∂a_k = λ_k ⊙ h_{k-1}.
    """
    a, u = as_tensor(a), as_tensor(u)
    if a.shape != u.shape:
        raise DimensionError(f"a {a.shape} и u {u.shape} должны совпадать")

    a_t = np.moveaxis(a.data, axis, 0)
    u_t = np.moveaxis(u.data, axis, 0)
    state_shape = a_t.shape[1:]
    if h0 is None:
        start = np.zeros(state_shape, dtype=u.dtype)
    else:
        h0 = as_tensor(h0)
        start = np.broadcast_to(h0.data, state_shape)
    h_t = _sequential_recurrence(a_t, u_t, start)

    def backward(g):
        g_t = np.moveaxis(g, axis, 0)
        length = g_t.shape[0]
        lam = np.empty_like(g_t)
        carry = np.zeros(state_shape, dtype=g_t.dtype)
        for k in range(length - 1, -1, -1):
            nxt = a_t[k + 1] * carry if k + 1 < length else 0.0
            carry = g_t[k] + nxt
            lam[k] = carry
        previous = np.concatenate([start[None], h_t[:-1]], axis=0) if length else h_t
        grads = [np.moveaxis(lam * previous, 0, axis), np.moveaxis(lam, 0, axis)]
        if h0 is not None:
            gh0 = a_t[0] * lam[0] if length else np.zeros(state_shape, dtype=g_t.dtype)
            while gh0.ndim > h0.ndim:
                gh0 = gh0.sum(axis=0)
            for i, extent in enumerate(h0.shape):
                if extent == 1 and gh0.shape[i] != 1:
                    gh0 = gh0.sum(axis=i, keepdims=True)
            grads.append(gh0)
        return grads

    parents = (a, u) if h0 is None else (a, u, h0)
    return Tensor.from_op(np.moveaxis(h_t, 0, axis), parents, backward, 'linear_recurrence')


def selective_coefficients(delta: Tensor, A: Tensor, method: str = 'bilinear') -> Tuple[Tensor, Tensor]:
    """
    Дискретизация диагональной A пошаговыми Δ_k

    Returns:
        (a: [..., L, E, N], b: [..., L, E, N]) - множители состояния и входа
    """
    if method not in METHODS:
        raise ParameterError(f"Неизвестный метод дискретизации: {method}")
    delta_e = delta.reshape(delta.shape + (1,))
    z = delta_e * A
    if method == 'bilinear':
        denom = 1.0 - z * 0.5
        return (1.0 + z * 0.5) / denom, delta_e / denom
    a = z.exp()
    # A строго отрицательна, поэтому деление на A безопасно
    return a, (a - 1.0) / A


def selective_scan(s: SelectiveInputs, x: Tensor, method: str = 'bilinear',
                   h0: Optional[Tensor] = None) -> Tensor:
    """
    Селективный скан с входо-зависимыми Δ_k, B_k, C_k

    y_k = C_k h_k + D ⊙ x_k, h_k = Ā_k h_{k-1} + B̄_k x_k, где Ā_k, B̄_k
    получены дискретизацией диагональной A с шагом Δ_k.

    Args:
        s: Пошаговые параметры (Tensor)
        x: Вход [..., L, E]
        method: 'bilinear' | 'zoh'
        h0: Начальное состояние [..., E, N]

    Returns:
        Tensor: [..., L, E]
    """
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("NaN на входе селективного скана")
    s.validate(x.shape)
    delta, B, C, A, D = (as_tensor(v) for v in (s.delta, s.B, s.C, s.A, s.D))

    a, bcoef = selective_coefficients(delta, A, method)
    B_e = B.reshape(B.shape[:-1] + (1, B.shape[-1]))
    C_e = C.reshape(C.shape[:-1] + (1, C.shape[-1]))
    x_e = x.reshape(x.shape + (1,))
    u = bcoef * B_e * x_e

    h = linear_recurrence(a, u, h0, axis=-3)
    return (h * C_e).sum(axis=-1) + x * D
