"""
Метрики сегментации: Dice, IoU и HD95 по классам
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .data import CLASS_NAMES, N_CLASSES
from .errors import DimensionError, ParameterError

logger = logging.getLogger(__name__)

METRIC_HEADER = ('class', 'name', 'dice', 'iou', 'hd95_mm')

_SIX_NEIGHBOURS = ndimage.generate_binary_structure(3, 1)


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"Формы предсказания и разметки различаются: {pred.shape} vs {gt.shape}")
    return pred, gt


def metric_overlap(pred_labels: np.ndarray, gt_labels: np.ndarray,
                   n_classes: int = N_CLASSES) -> Dict[int, Tuple[float, float]]:
    """
    Dice и IoU для каждого класса переднего плана

    Класс, пустой в обеих масках, получает Dice = IoU = 1.

    Returns:
        dict: класс -> (dice, iou)
    """
    pred, gt = _check_pair(pred_labels, gt_labels)
    scores = {}
    for cls in range(1, n_classes):
        p, g = pred == cls, gt == cls
        inter = int(np.count_nonzero(p & g))
        total = int(np.count_nonzero(p)) + int(np.count_nonzero(g))
        if total == 0:
            scores[cls] = (1.0, 1.0)
            continue
        union = total - inter
        scores[cls] = (2.0 * inter / total, inter / union)
    return scores


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Граничные воксели маски (6-связность), индексы [K, ndim]"""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 2:
        mask = mask[None]
    eroded = ndimage.binary_erosion(mask, structure=_SIX_NEIGHBOURS, border_value=0)
    return np.argwhere(mask & ~eroded)


def metric_hd95(pred_labels: np.ndarray, gt_labels: np.ndarray,
                spacing_mm: Sequence[float], cls: int) -> Optional[float]:
    """
    95-й перцентиль симметричного расстояния между поверхностями, мм

    Расстояния считаются точным поиском ближайшего соседа в обе стороны;
    результат - максимум двух 95-х перцентилей (линейная интерполяция).

    Returns:
        float или None, если класс пуст хотя бы в одной маске
    """
    pred, gt = _check_pair(pred_labels, gt_labels)
    if len(spacing_mm) != 3 or min(spacing_mm) <= 0:
        raise ParameterError(f"Шаг сетки должен быть тремя положительными числами: {spacing_mm}")
    p, g = pred == cls, gt == cls
    if not p.any() or not g.any():
        return None

    scale = np.asarray(spacing_mm, dtype=np.float64)
    p_pts = surface_voxels(p) * scale
    g_pts = surface_voxels(g) * scale
    d_pg, _ = cKDTree(g_pts).query(p_pts)
    d_gp, _ = cKDTree(p_pts).query(g_pts)
    return float(max(np.percentile(d_pg, 95, method='linear'),
                     np.percentile(d_gp, 95, method='linear')))


@dataclass
class ClassScores:
    label: int
    name: str
    dice: float
    iou: float
    hd95: Optional[float]

    def row(self) -> Tuple:
        hd95 = '' if self.hd95 is None else f"{self.hd95:.6f}"
        return (self.label, self.name, f"{self.dice:.6f}", f"{self.iou:.6f}", hd95)


def score_case(pred_labels: np.ndarray, gt_labels: np.ndarray, spacing_mm: Sequence[float],
               n_classes: int = N_CLASSES) -> List[ClassScores]:
    """Все метрики одного случая по классам переднего плана"""
    overlap = metric_overlap(pred_labels, gt_labels, n_classes)
    return [
        ClassScores(
            label=cls,
            name=CLASS_NAMES[cls] if cls < len(CLASS_NAMES) else f"class_{cls}",
            dice=dice,
            iou=iou,
            hd95=metric_hd95(pred_labels, gt_labels, spacing_mm, cls),
        )
        for cls, (dice, iou) in overlap.items()
    ]


@dataclass
class MetricReport:
    """
    Метрики по классам, усреднённые по случаям, и средние по классам

    HD95 класса усредняется только по случаям, где он определён.
    """
    classes: List[ClassScores]
    cases: int

    @classmethod
    def aggregate(cls, per_case: List[List[ClassScores]]) -> 'MetricReport':
        if not per_case:
            raise ParameterError("Нет случаев для агрегации метрик")
        merged = []
        for scores in zip(*per_case):
            first = scores[0]
            defined = [s.hd95 for s in scores if s.hd95 is not None]
            merged.append(ClassScores(
                label=first.label,
                name=first.name,
                dice=float(np.mean([s.dice for s in scores])),
                iou=float(np.mean([s.iou for s in scores])),
                hd95=float(np.mean(defined)) if defined else None,
            ))
        return cls(classes=merged, cases=len(per_case))

    @property
    def mean_dice(self) -> float:
        return float(np.mean([c.dice for c in self.classes]))

    @property
    def mean_iou(self) -> float:
        return float(np.mean([c.iou for c in self.classes]))

    @property
    def mean_hd95(self) -> Optional[float]:
        defined = [c.hd95 for c in self.classes if c.hd95 is not None]
        return float(np.mean(defined)) if defined else None

    def rows(self) -> List[Tuple]:
        mean = ClassScores(label=-1, name='mean', dice=self.mean_dice, iou=self.mean_iou,
                           hd95=self.mean_hd95)
        return [c.row() for c in self.classes] + [mean.row()]

    def summary(self) -> str:
        lines = [f"Cases: {self.cases}"]
        for c in self.classes:
            hd95 = 'n/a' if c.hd95 is None else f"{c.hd95:.2f} mm"
            lines.append(f"  {c.name:<4} Dice {c.dice:.4f}  IoU {c.iou:.4f}  HD95 {hd95}")
        lines.append(f"  mean Dice {self.mean_dice:.4f}  IoU {self.mean_iou:.4f}")
        return '\n'.join(lines)
