"""Tracking, invariance and distillation losses."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, Sequence

import numpy as np

from . import numerics as nx
from .head import Box, PredictionMaps, Targets
from .numerics import Tensor


@dataclass
class LossConfig:
    lambda_iou: float = 2.0
    lambda_l1: float = 5.0
    gamma: float = 2.0e-4
    alpha: float = 1.0
    beta: float = 1.0
    sigma: float = 0.3
    momentum: float = 0.99
    focal_a: float = 2.0
    focal_c: float = 4.0

    def validate(self) -> "LossConfig":
        if self.lambda_iou < 0 or self.lambda_l1 < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if not 0.0 <= self.sigma <= 1.0:
            raise ValueError(f"sigma must lie in [0, 1], got {self.sigma}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


class RunningMean:
    """Exponential moving average, seeded by the first observation."""

    def __init__(self, momentum: float = 0.99):
        self.momentum = momentum
        self.value = 0.0
        self.initialized = False

    def update(self, x: float) -> float:
        x = float(x)
        if not math.isfinite(x):
            raise ValueError("running mean update must be finite")
        if not self.initialized:
            self.value = x
            self.initialized = True
        else:
            self.value = self.momentum * self.value + (1.0 - self.momentum) * x
        return self.value


# ----------------------------------------------------------------------------
# boxes


def giou_xyxy(a: Sequence[float], b: Sequence[float]) -> float:
    """Generalized IoU of two corner-format boxes."""
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    if area_a <= 0 or area_b <= 0:
        raise ValueError("degenerate box")
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = area_a + area_b - inter
    enclose = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    return inter / union - (enclose - union) / enclose


def giou(a: Box, b: Box) -> float:
    return giou_xyxy(a.xyxy(), b.xyxy())


def iou(a: Box, b: Box) -> float:
    ax0, ay0, ax1, ay1 = a.xyxy()
    bx0, by0, bx1, by1 = b.xyxy()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def giou_tensor(pred: Tensor, target: Tensor) -> Tensor:
    """Row-wise GIoU of N×4 centre/size boxes; differentiable in ``pred``."""
    pcx, pcy, pw, ph = (pred[:, i] for i in range(4))
    tcx, tcy, tw, th = (target[:, i] for i in range(4))
    px0, px1 = pcx - 0.5 * pw, pcx + 0.5 * pw
    py0, py1 = pcy - 0.5 * ph, pcy + 0.5 * ph
    tx0, tx1 = tcx - 0.5 * tw, tcx + 0.5 * tw
    ty0, ty1 = tcy - 0.5 * th, tcy + 0.5 * th
    iw = nx.relu(nx.minimum(px1, tx1) - nx.maximum(px0, tx0))
    ih = nx.relu(nx.minimum(py1, ty1) - nx.maximum(py0, ty0))
    inter = iw * ih
    union = pw * ph + tw * th - inter
    ew = nx.maximum(px1, tx1) - nx.minimum(px0, tx0)
    eh = nx.maximum(py1, ty1) - nx.minimum(py0, ty0)
    enclose = ew * eh
    return inter / union - (enclose - union) / enclose


# ----------------------------------------------------------------------------
# prediction losses


def focal_loss(p: Tensor, y, config: LossConfig = None, eps: float = 1e-6) -> Tensor:
    """Penalty-reduced focal loss, averaged over images (one positive each).

    ``p`` and ``y`` are G×G or N×G×G; ``y`` holds exactly one 1 per image.
    """
    cfg = config or LossConfig()
    y = np.asarray(y, dtype=p.dtype)
    if y.ndim == 2:
        y = y[None]
        p = p.reshape(1, *p.shape)
    pos = (y == 1.0).astype(p.dtype)
    if np.any(pos.sum(axis=(1, 2)) < 1):
        raise ValueError("focal loss needs a positive cell in every target map")
    neg_w = ((1.0 - y) ** cfg.focal_c) * (1.0 - pos)
    pc = nx.clip(p, eps, 1.0 - eps)
    one_minus = 1.0 - pc
    pos_term = _powc(one_minus, cfg.focal_a) * nx.log(pc) * pos
    neg_term = _powc(pc, cfg.focal_a) * nx.log(one_minus) * neg_w
    per_image = (pos_term + neg_term).sum(axis=(1, 2)) / pos.sum(axis=(1, 2))
    return -per_image.mean()


def _powc(x: Tensor, a: float) -> Tensor:
    if a == 2.0:
        return nx.square(x)
    if a == 1.0:
        return x
    return nx.exp(nx.log(x) * a)


def gather_boxes(maps: PredictionMaps, cells) -> Tensor:
    """N×4 predicted (cx, cy, w, h) read at one cell per image."""
    g = maps.grid
    n = maps.p.shape[0]
    rows = np.array([rc[0] for rc in cells])
    cols = np.array([rc[1] for rc in cells])
    idx = np.arange(n)
    ox = maps.o[idx, 0, rows, cols]
    oy = maps.o[idx, 1, rows, cols]
    sw = maps.s[idx, 0, rows, cols]
    sh = maps.s[idx, 1, rows, cols]
    cx = (ox + cols.astype(maps.p.dtype)) * (1.0 / g)
    cy = (oy + rows.astype(maps.p.dtype)) * (1.0 / g)
    return nx.concat([t.reshape(n, 1) for t in (cx, cy, sw, sh)], axis=1)


def pred_loss(maps: PredictionMaps, targets: Sequence[Targets], gt_boxes: Sequence[Box], config: LossConfig = None):
    """Focal + weighted GIoU + weighted L1, box terms read at the ground-truth centre cell.

    Returns ``(total, parts)`` where parts has tensors ``cls``, ``iou``, ``l1``.
    """
    cfg = config or LossConfig()
    heat = np.stack([t.heatmap for t in targets])
    l_cls = focal_loss(maps.p, heat, cfg)
    pred = gather_boxes(maps, [t.center_cell for t in targets])
    tgt = Tensor(np.array([b.as_array() for b in gt_boxes], dtype=maps.p.dtype))
    l_iou = (1.0 - giou_tensor(pred, tgt)).mean()
    l_l1 = nx.absolute(pred - tgt).mean()
    total = combine_pred(l_cls, l_iou, l_l1, cfg)
    return total, {"cls": l_cls, "iou": l_iou, "l1": l_l1}


def combine_pred(l_cls, l_iou, l_l1, config: LossConfig = None):
    cfg = config or LossConfig()
    return l_cls + cfg.lambda_iou * l_iou + cfg.lambda_l1 * l_l1


# ----------------------------------------------------------------------------
# feature losses


def orr_loss(t_plain: Tensor, t_masked: Tensor) -> Tensor:
    """Mean squared difference between plain and masked template features."""
    if t_plain.shape != t_masked.shape:
        raise ValueError(f"shape mismatch {t_plain.shape} vs {t_masked.shape}")
    return nx.square(t_plain - t_masked).mean()


def afkd_weight(l_iou: float, mean: RunningMean, alpha: float, beta: float) -> float:
    """alpha + beta * (l_iou - running mean), clamped to [0, 2 alpha]."""
    if not mean.initialized:
        raise ValueError("running mean of the GIoU loss is not initialized")
    w = alpha + beta * (float(l_iou) - mean.value)
    return min(max(w, 0.0), 2.0 * alpha)


def afkd_loss(t_teacher, t_student: Tensor, weight: float) -> Tensor:
    """``weight`` times the MSE between teacher and student features; teacher is a constant."""
    teacher = t_teacher.data if isinstance(t_teacher, Tensor) else np.asarray(t_teacher)
    if teacher.shape != t_student.shape:
        raise ValueError(f"teacher {teacher.shape} and student {t_student.shape} features differ in shape")
    diff = t_student - Tensor(teacher.astype(t_student.dtype))
    return nx.square(diff).mean() * float(weight)


def teacher_total(l_pred, l_orr, config: LossConfig = None):
    cfg = config or LossConfig()
    return l_pred + cfg.gamma * l_orr


def student_total(l_pred, l_afkd):
    return l_pred + l_afkd


def parts_to_floats(parts: Dict[str, Tensor]) -> Dict[str, float]:
    return {k: float(v.data) if isinstance(v, Tensor) else float(v) for k, v in parts.items()}
