"""
Функция потерь, расписание скорости обучения, AdamW и цикл обучения
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import save_checkpoint
from .data import N_CLASSES, LabeledVolume, augment_flip_rot90
from .errors import DimensionError, NumericError, ParameterError
from .metrics import MetricReport, score_case
from .nn import Module, Parameter
from .tensor import Tensor, as_tensor, log_softmax_lastdim, no_grad

logger = logging.getLogger(__name__)

DICE_SMOOTH = 1e-5


@dataclass
class TrainConfig:
    base_lr: float = 2e-4
    warmup_steps: int = 10
    total_steps: int = 100
    clip_norm: float = 1.0
    batch_size: int = 2
    weight_decay: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ParameterError(
                f"Нужно 0 <= warmup_steps < total_steps, получено {self.warmup_steps}, {self.total_steps}"
            )
        if self.clip_norm <= 0:
            raise ParameterError(f"clip_norm должен быть > 0, получено {self.clip_norm}")
        if self.base_lr <= 0 or self.batch_size < 1 or self.weight_decay < 0:
            raise ParameterError("base_lr > 0, batch_size >= 1 и weight_decay >= 0 обязательны")

    @classmethod
    def overfit(cls, seed: int = 0) -> 'TrainConfig':
        """
        Запоминание одного пакета за 100 шагов

        При base_lr 2e-4 AdamW сдвигает вес примерно на 2e-4 за шаг, и за 100 шагов
        с косинусом до нуля потери падают лишь до 0.4-0.7 от начальных. Здесь
        скорость 1e-2 почти постоянна (косинус растянут на 1000 шагов), затухания нет.
        """
        return cls(base_lr=1e-2, warmup_steps=5, total_steps=1000, weight_decay=0.0, seed=seed)


# ---- потери -------------------------------------------------------------

def loss_dice_ce(logits: Tensor, labels: np.ndarray) -> Tensor:
    """
    L = L_Dice + L_CE

    Soft Dice по классам переднего плана (сглаживание 1e-5), усреднённый;
    перекрёстная энтропия по всем вокселям.

    Args:
        logits: [N, K, ...] или [K, ...]
        labels: [N, ...] или [...], целые классы

    Raises:
        DimensionError: Формы не согласованы
        ParameterError: Метка вне диапазона
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    batched = (logits.ndim == labels.ndim + 1 and labels.ndim >= 1
               and logits.shape[0] == labels.shape[0] and logits.shape[2:] == labels.shape[1:])
    if not batched:
        if logits.shape[1:] != labels.shape:
            raise DimensionError(f"Логиты {logits.shape} не согласованы с разметкой {labels.shape}")
        logits = logits.reshape((1,) + logits.shape)
        labels = labels[None]
    n_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ParameterError(f"Метки должны быть в [0, {n_classes}), получено [{labels.min()}, {labels.max()}]")

    axes = (0,) + tuple(range(2, logits.ndim)) + (1,)
    flat = logits.transpose(axes).reshape(-1, n_classes)
    onehot = Tensor(np.eye(n_classes)[labels.reshape(-1).astype(np.int64)])

    log_probs = log_softmax_lastdim(flat)
    ce = -(log_probs * onehot).sum(axis=-1).mean()

    probs = log_probs.exp()
    inter = (probs * onehot).sum(axis=0)[1:]
    denom = probs.sum(axis=0)[1:] + onehot.sum(axis=0)[1:]
    dice = (inter * 2.0 + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    return (1.0 - dice.mean()) + ce


# ---- расписание и оптимизатор --------------------------------------------

def lr_at(cfg: TrainConfig, step: int) -> float:
    """
    Линейный разогрев от 0 до base_lr, затем косинус до 0 к total_steps

    Raises:
        ParameterError: step вне [0, total_steps]
    """
    if not 0 <= step <= cfg.total_steps:
        raise ParameterError(f"Шаг {step} вне [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    """Моменты AdamW по именам обучаемых параметров"""
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def global_grad_norm(params: Sequence[Parameter]) -> float:
    total = sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None)
    return math.sqrt(total)


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """
    Масштабирует градиенты так, чтобы общая норма не превышала max_norm

    Returns:
        float: Норма до обрезки
    """
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def adamw_update(named: Sequence[Tuple[str, Parameter]], state: OptimizerState,
                 cfg: TrainConfig, lr: float) -> None:
    """Шаг AdamW с раздельным затуханием весов, только для параметров с градиентом"""
    beta1, beta2 = cfg.betas
    t = state.step
    for name, p in named:
        if not p.requires_grad or p.grad is None:
            continue
        grad = p.grad.astype(np.float64)
        m = state.m.get(name, np.zeros_like(grad)) * beta1 + (1 - beta1) * grad
        v = state.v.get(name, np.zeros_like(grad)) * beta2 + (1 - beta2) * grad * grad
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        update = m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * p.data
        p.data[...] = p.data - lr * update


# ---- шаг обучения -------------------------------------------------------

@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray


@dataclass
class StepResult:
    loss: float
    lr: float
    grad_norm: float


def make_batch(volumes: Sequence[LabeledVolume], two_d: bool) -> Batch:
    """
    Собирает пакет из патчей

    two_d: патчи глубины 1 превращаются в срезы [N, 1, H, W]
    """
    images = np.stack([lv.image for lv in volumes])
    labels = np.stack([lv.labels for lv in volumes]).astype(np.int64)
    if two_d:
        if images.shape[2] != 1:
            raise DimensionError(f"Для 2D-модели нужны патчи глубины 1, получено {images.shape}")
        images, labels = images[:, :, 0], labels[:, 0]
    return Batch(images=images, labels=labels)


def train_step(model: Module, batch: Batch, cfg: TrainConfig,
               state: OptimizerState) -> Tuple[StepResult, OptimizerState]:
    """
    Прямой проход, потери, обратный проход, обрезка градиента и шаг AdamW

    Raises:
        NumericError: Нечисловые потери (шаг не выполняется)
    """
    model.zero_grad()
    logits = model(Tensor(batch.images))
    loss = loss_dice_ce(logits, batch.labels)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"Нечисловые потери на шаге {state.step}: {value}")

    loss.backward()
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    grad_norm = clip_grad_norm([p for _, p in named], cfg.clip_norm)
    if grad_norm > cfg.clip_norm:
        logger.debug(f"Clipped gradient norm {grad_norm:.4f} -> {cfg.clip_norm}")

    state.step += 1
    lr = lr_at(cfg, min(state.step, cfg.total_steps))
    adamw_update(named, state, cfg, lr)
    return StepResult(loss=value, lr=lr, grad_norm=grad_norm), state


# ---- оценка -------------------------------------------------------------

def is_two_d(model: Module) -> bool:
    return getattr(model, 'kind', '') == 'dual_branch'


def predict_labels(model: Module, lv: LabeledVolume) -> np.ndarray:
    """
    Классы по argmax логитов, форма [D, H, W]

    2D-модель обрабатывает объём срез за срезом.
    """
    with no_grad():
        if is_two_d(model):
            slices = np.transpose(lv.image, (1, 0, 2, 3))
            logits = model(Tensor(slices)).data
            return np.argmax(logits, axis=1).astype(np.uint8)
        logits = model(Tensor(lv.image)).data
        return np.argmax(logits, axis=0).astype(np.uint8)


def evaluate(model: Module, cases: Sequence[LabeledVolume]) -> MetricReport:
    """Метрики по случаям, усреднённые по случаям, затем по классам"""
    per_case = []
    for lv in cases:
        if not lv.has_labels:
            raise ParameterError("Для оценки нужна разметка")
        pred = predict_labels(model, lv)
        n_classes = getattr(getattr(model, 'settings', None), 'n_classes', N_CLASSES)
        per_case.append(score_case(pred, lv.labels, lv.spacing, n_classes))
    return MetricReport.aggregate(per_case)


# ---- цикл обучения ------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_dice: float
    lr: float
    grad_norm: float


@dataclass
class TrainingHistory:
    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_dice: float = -1.0

    HEADER = ('epoch', 'loss', 'val_dice', 'lr', 'grad_norm')

    def rows(self) -> List[Tuple]:
        return [
            (r.epoch, f"{r.loss:.6f}", f"{r.val_dice:.6f}", f"{r.lr:.8f}", f"{r.grad_norm:.6f}")
            for r in self.records
        ]


def steps_per_epoch(n_cases: int, batch_size: int) -> int:
    return math.ceil(n_cases / batch_size)


def fit(model: Module, train: Sequence[LabeledVolume], val: Sequence[LabeledVolume],
        cfg: TrainConfig, epochs: int, checkpoint_path: Optional[str] = None,
        augment: bool = True) -> TrainingHistory:
    """
    Эпохи по перемешанным пакетам, после каждой - Dice на валидации;
    лучшая по Dice модель сохраняется в checkpoint_path

    Raises:
        ParameterError: total_steps меньше числа шагов обучения
    """
    if not train:
        raise ParameterError("Пустая обучающая выборка")
    needed = epochs * steps_per_epoch(len(train), cfg.batch_size)
    if cfg.total_steps < needed:
        raise ParameterError(f"total_steps={cfg.total_steps} меньше числа шагов обучения {needed}")

    two_d = is_two_d(model)
    state = OptimizerState()
    history = TrainingHistory()
    for epoch in range(1, epochs + 1):
        rng = np.random.default_rng(cfg.seed * 100003 + epoch)
        order = rng.permutation(len(train))
        losses, norms, lr = [], [], 0.0
        for start in range(0, len(order), cfg.batch_size):
            items = [train[i] for i in order[start:start + cfg.batch_size]]
            if augment:
                items = [augment_flip_rot90(lv, rng) for lv in items]
            result, state = train_step(model, make_batch(items, two_d), cfg, state)
            losses.append(result.loss)
            norms.append(result.grad_norm)
            lr = result.lr

        val_dice = evaluate(model, val).mean_dice if val else float('nan')
        record = EpochRecord(epoch=epoch, loss=float(np.mean(losses)), val_dice=val_dice,
                             lr=lr, grad_norm=float(np.mean(norms)))
        history.records.append(record)
        logger.info(
            f"Epoch {epoch}/{epochs}: loss {record.loss:.4f}, val Dice {val_dice:.4f}, lr {lr:.2e}"
        )
        if val and val_dice > history.best_dice:
            history.best_dice, history.best_epoch = val_dice, epoch
            if checkpoint_path is not None:
                save_checkpoint(model, checkpoint_path)
    return history
