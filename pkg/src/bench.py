"""
Замеры сложности: селективный скан против полного self-attention,
пропускная способность моделей
"""

import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ParameterError
from .models import assert_frozen
from .nn import Module
from .ssm import SelectiveInputs, selective_scan
from .tensor import Tensor, no_grad, softmax_lastdim

logger = logging.getLogger(__name__)

SCALING_HEADER = ('length', 'scan_seconds', 'attention_seconds', 'scan_ratio', 'attention_ratio')
THROUGHPUT_HEADER = ('kind', 'samples_per_second', 'trainable', 'frozen', 'total', 'trainable_ratio')


@dataclass
class BenchPoint:
    length: int
    scan_seconds: float
    attention_seconds: float
    scan_ratio: Optional[float] = None
    attention_ratio: Optional[float] = None


@dataclass
class BenchReport:
    """Медианные времена по длинам, отношения на удвоение и показатели роста"""
    d_model: int
    repeats: int
    points: List[BenchPoint] = field(default_factory=list)
    scan_exponent: float = float('nan')
    attention_exponent: float = float('nan')

    def rows(self) -> List[Tuple]:
        def fmt(value):
            return '' if value is None else f"{value:.4f}"
        return [
            (p.length, f"{p.scan_seconds:.6f}", f"{p.attention_seconds:.6f}",
             fmt(p.scan_ratio), fmt(p.attention_ratio))
            for p in self.points
        ]

    def summary(self) -> str:
        lines = [f"d_model={self.d_model}, repeats={self.repeats}"]
        for p in self.points:
            lines.append(f"  L={p.length:<6} scan {p.scan_seconds * 1e3:8.2f} ms   "
                         f"attention {p.attention_seconds * 1e3:8.2f} ms")
        lines.append(f"  growth exponent: scan {self.scan_exponent:.2f}, "
                     f"attention {self.attention_exponent:.2f}")
        return '\n'.join(lines)


def _median_time(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return float(np.median(times))


def _fit_exponent(lengths: Sequence[int], seconds: Sequence[float]) -> float:
    if len(lengths) < 2:
        return float('nan')
    slope, _ = np.polyfit(np.log(lengths), np.log(np.maximum(seconds, 1e-12)), 1)
    return float(slope)


def bench_scaling(lengths: Sequence[int], d_model: int = 64, repeats: int = 3,
                  d_state: int = 8, seed: int = 0) -> BenchReport:
    """
    Сравнивает время селективного скана и полного self-attention

    Raises:
        ParameterError: Длины не по возрастанию или repeats < 3
    """
    lengths = [int(n) for n in lengths]
    if not lengths or lengths != sorted(lengths) or min(lengths) < 1:
        raise ParameterError(f"Длины должны быть положительными и идти по возрастанию: {lengths}")
    if repeats < 3:
        raise ParameterError(f"Нужно не меньше 3 повторов, получено {repeats}")

    rng = np.random.default_rng(seed)
    report = BenchReport(d_model=d_model, repeats=repeats)
    a = Tensor(-np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_model, 1)))
    d = Tensor(np.ones(d_model))

    with no_grad():
        for length in lengths:
            x = Tensor(rng.standard_normal((length, d_model)))
            inputs = SelectiveInputs(
                delta=Tensor(rng.uniform(0.01, 0.1, size=(length, d_model))),
                B=Tensor(rng.standard_normal((length, d_state))),
                C=Tensor(rng.standard_normal((length, d_state))),
                A=a, D=d,
            )
            q = Tensor(rng.standard_normal((length, d_model)))
            k = Tensor(rng.standard_normal((length, d_model)))

            scan_time = _median_time(lambda: selective_scan(inputs, x), repeats)
            attn_time = _median_time(
                lambda: softmax_lastdim(q @ k.T * (d_model ** -0.5)) @ x, repeats
            )
            point = BenchPoint(length=length, scan_seconds=scan_time, attention_seconds=attn_time)
            if report.points:
                prev = report.points[-1]
                point.scan_ratio = scan_time / prev.scan_seconds
                point.attention_ratio = attn_time / prev.attention_seconds
            report.points.append(point)
            logger.info(f"Bench L={length}: scan {scan_time:.4f}s, attention {attn_time:.4f}s")

    report.scan_exponent = _fit_exponent(lengths, [p.scan_seconds for p in report.points])
    report.attention_exponent = _fit_exponent(lengths, [p.attention_seconds for p in report.points])
    return report


@dataclass
class ThroughputReport:
    kind: str
    samples_per_second: float
    trainable: int
    frozen: int
    total: int

    @property
    def ratio(self) -> float:
        return self.trainable / self.total if self.total else 0.0

    def row(self) -> Tuple:
        return (self.kind, f"{self.samples_per_second:.4f}", self.trainable, self.frozen,
                self.total, f"{self.ratio:.6f}")


def bench_throughput(model: Module, input_shape: Sequence[int], repeats: int = 3,
                     seed: int = 0) -> ThroughputReport:
    """Скорость вывода (образцов в секунду) и учёт параметров модели"""
    if repeats < 1:
        raise ParameterError(f"repeats должен быть >= 1, получено {repeats}")
    batch = np.random.default_rng(seed).random(tuple(input_shape)).astype(np.float32)
    with no_grad():
        seconds = _median_time(lambda: model(Tensor(batch)), repeats)
    samples = input_shape[0]
    policy = getattr(model, 'policy', None)
    frozen = assert_frozen(policy, model).frozen if policy is not None else 0
    total = model.num_parameters()
    return ThroughputReport(
        kind=getattr(model, 'kind', type(model).__name__),
        samples_per_second=samples / max(seconds, 1e-12),
        trainable=total - frozen,
        frozen=frozen,
        total=total,
    )
