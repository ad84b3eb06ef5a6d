"""Two-phase training: occlusion-robust teacher, then a distilled student."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from . import pointproc as pp
from .backbone import ViTConfig, split_tokens
from .checkpoint import load_checkpoint, save_checkpoint
from .head import make_targets
from .losses import (
    LossConfig,
    RunningMean,
    afkd_loss,
    afkd_weight,
    orr_loss,
    pred_loss,
    student_total,
    teacher_total,
)
from .model import Tracker
from .synth import CropConfig, Sample, draw_pair, scene_bank

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "l_cls", "l_iou", "l_l1", "l_orr", "l_afkd", "weight", "total")
KD_MODES = ("none", "kd", "afkd")


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-4
    lr_drop_at: float = 0.8
    sigma: float = 0.3
    polarity: str = pp.POINTS_KEEP
    coordinate_mode: str = pp.NORMALIZED
    bandwidth: float = 1.0
    mask_block: int = 8
    use_orr: bool = True
    kd_mode: str = "afkd"
    student_depth: int = 2
    train_scenes: int = 256
    occluder_prob: float = 0.3
    heldout_samples: int = 128
    data_seed: int = 1000
    seed: int = 0
    log_every: int = 1
    loss: LossConfig = field(default_factory=LossConfig)
    backbone: ViTConfig = field(default_factory=ViTConfig)
    crop: CropConfig = field(default_factory=lambda: CropConfig(center_jitter=0.75, scale_jitter=0.15))

    def validate(self) -> "TrainConfig":
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight decay must be nonnegative")
        if self.kd_mode not in KD_MODES:
            raise ValueError(f"kd_mode must be one of {KD_MODES}")
        if self.polarity not in (pp.POINTS_KEEP, pp.POINTS_MASK):
            raise ValueError(f"unknown polarity {self.polarity!r}")
        if self.coordinate_mode not in (pp.NORMALIZED, pp.RAW):
            raise ValueError(f"unknown coordinate mode {self.coordinate_mode!r}")
        if not 0.0 <= self.sigma <= 1.0:
            raise ValueError(f"sigma must lie in [0, 1], got {self.sigma}")
        self.loss.validate()
        return self

    @property
    def grid(self) -> pp.GridSpec:
        h, w = self.backbone.template_size
        return pp.GridSpec(h, w, self.mask_block)

    @property
    def crop_config(self) -> CropConfig:
        return replace(
            self.crop, template_size=self.backbone.template_size[0], search_size=self.backbone.search_size[0]
        )

    def to_dict(self) -> dict:
        return asdict(self)


class AdamW:
    """Adam with decoupled weight decay on matrices (ndim >= 2)."""

    def __init__(self, params: Dict[str, nx.Tensor], weight_decay: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            v = self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd and p.data.ndim >= 2:
                upd = upd + self.wd * p.data
            p.data = (p.data - lr * upd).astype(p.data.dtype)

    def zero_grad(self) -> None:
        nx.zero_grad(self.params.values())


def lr_at(cfg: TrainConfig, step: int) -> float:
    return cfg.lr * (0.1 if step >= int(cfg.lr_drop_at * cfg.steps) else 1.0)


def stack_batch(samples: Sequence[Sample], grid: int):
    z = np.stack([s.z for s in samples])
    x = np.stack([s.x for s in samples])
    gts = [s.gt for s in samples]
    targets = [make_targets(g, grid) for g in gts]
    return z, x, gts, targets


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


class BatchSource:
    """Endless deterministic stream of training batches."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.scenes = scene_bank(cfg.train_scenes, cfg.data_seed, occluder_prob=cfg.occluder_prob)
        self.rng = _rng(cfg.seed, 10)
        self.crop = cfg.crop_config

    def next(self) -> List[Sample]:
        return [draw_pair(self.scenes, self.rng, self.crop) for _ in range(self.cfg.batch_size)]


def heldout_samples(cfg: TrainConfig, count: Optional[int] = None) -> List[Sample]:
    """Fixed held-out pairs from scenes disjoint from the training bank."""
    count = cfg.heldout_samples if count is None else count
    scenes = scene_bank(64, cfg.data_seed + 7777, occluder_prob=cfg.occluder_prob)
    rng = _rng(cfg.data_seed + 7777, 3)
    return [draw_pair(scenes, rng, cfg.crop_config) for _ in range(count)]


def _fmt(v: float) -> str:
    return repr(float(v))


def log_to_csv(rows: List[Dict[str, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in rows:
        w.writerow([int(r["step"])] + [_fmt(r[c]) for c in LOG_COLUMNS[1:]])
    return buf.getvalue()


def _check_loss(total: nx.Tensor, step: int) -> None:
    if not math.isfinite(float(total.data)):
        raise FloatingPointError(f"non-finite loss at step {step}")


def _assert_teacher_isolated(total: nx.Tensor, teacher: Tracker) -> None:
    frozen = {id(t) for t in teacher.params.values()}
    reached = [n for n in nx.topological_order(total) if id(n) in frozen]
    if reached or any(t.grad is not None for t in teacher.params.values()):
        raise RuntimeError("student loss graph reaches teacher parameters")


@dataclass
class TrainResult:
    model: Tracker
    rows: List[Dict[str, float]]

    def log_csv(self) -> str:
        return log_to_csv(self.rows)


def _fit(
    model: Tracker,
    cfg: TrainConfig,
    source: BatchSource,
    use_orr: bool,
    teacher: Optional[Tracker] = None,
    kd_mode: str = "none",
) -> TrainResult:
    """Shared optimization loop.

    Every step samples a batch and computes the prediction loss on the plain
    (Z, X) branch.  With ``use_orr`` a Cox-masked template branch is run
    through the same backbone and the weighted invariance term is added.
    With a teacher and ``kd_mode`` other than "none" the teacher's tokens are
    distilled into the model, weighted by the running GIoU-loss deviation
    (slope forced to zero in "kd" mode).
    """
    mask_rng = _rng(cfg.seed, 11)
    opt = AdamW(model.params, cfg.weight_decay)
    running = RunningMean(cfg.loss.momentum)
    beta = 0.0 if kd_mode == "kd" else cfg.loss.beta
    grid = cfg.grid
    g = model.config.search_grid
    rows = []
    for step in range(cfg.steps):
        z, x, gts, targets = stack_batch(source.next(), g)
        tokens, batch, maps = model.forward(z, x, training=True)
        l_pred, parts = pred_loss(maps, targets, gts, cfg.loss)
        total = l_pred
        l_orr_val = l_afkd_val = weight = 0.0
        if use_orr:
            masks = [
                pp.cox_mask(grid, cfg.sigma, mask_rng, cfg.polarity, cfg.coordinate_mode, cfg.bandwidth)
                for _ in range(len(z))
            ]
            z_masked = np.stack([pp.apply_mask(zi, m, grid) for zi, m in zip(z, masks)])
            tokens_m, batch_m = model.features(z_masked, x)
            t_plain, _ = split_tokens(tokens, batch)
            t_masked, _ = split_tokens(tokens_m, batch_m)
            l_orr = orr_loss(t_plain, t_masked)
            total = teacher_total(total, l_orr, cfg.loss)
            l_orr_val = float(l_orr.data)
        if teacher is not None and kd_mode != "none":
            with nx.no_grad():
                tokens_t, _ = teacher.features(z, x)
            l_iou = float(parts["iou"].data)
            running.update(l_iou)
            weight = afkd_weight(l_iou, running, cfg.loss.alpha, beta)
            l_afkd = afkd_loss(tokens_t, tokens, weight)
            total = student_total(total, l_afkd)
            l_afkd_val = float(l_afkd.data)
            if step == 0:
                _assert_teacher_isolated(total, teacher)
        try:
            _check_loss(total, step)
        except FloatingPointError:
            log.error("training diverged at step %d: parts=%s", step, {k: float(v.data) for k, v in parts.items()})
            raise
        nx.backward(total)
        opt.step(lr_at(cfg, step))
        opt.zero_grad()
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            rows.append(
                {
                    "step": step,
                    "l_cls": float(parts["cls"].data),
                    "l_iou": float(parts["iou"].data),
                    "l_l1": float(parts["l1"].data),
                    "l_orr": l_orr_val,
                    "l_afkd": l_afkd_val,
                    "weight": weight,
                    "total": float(total.data),
                }
            )
    return TrainResult(model, rows)


def train_teacher(cfg: TrainConfig, source: Optional[BatchSource] = None) -> TrainResult:
    """Teacher phase: prediction loss plus the weighted masked/unmasked template invariance."""
    cfg.validate()
    model = Tracker(replace(cfg.backbone, seed=cfg.seed))
    return _fit(model, cfg, source or BatchSource(cfg), use_orr=cfg.use_orr)


def train_student(
    teacher: Tracker, cfg: TrainConfig, source: Optional[BatchSource] = None, use_orr: bool = False
) -> TrainResult:
    """Student phase: prediction loss plus difficulty-weighted feature distillation from a frozen teacher.

    The student is ``cfg.student_depth`` blocks deep, initialized from
    ``cfg.seed + 1``.  ``use_orr`` additionally applies the masked-template
    invariance to the student itself (used by the ablation grid).
    """
    cfg.validate()
    scfg = replace(cfg.backbone, depth=cfg.student_depth, seed=cfg.seed + 1)
    if scfg.embed_dim != teacher.config.embed_dim:
        raise ValueError(
            f"student width {scfg.embed_dim} differs from teacher width {teacher.config.embed_dim}"
        )
    teacher.freeze()
    student = Tracker(scfg)
    return _fit(student, cfg, source or BatchSource(cfg), use_orr=use_orr, teacher=teacher, kd_mode=cfg.kd_mode)


# ----------------------------------------------------------------------------
# held-out measurements


def heldout_pred_loss(model: Tracker, samples: Sequence[Sample], cfg: LossConfig = None, batch: int = 32) -> float:
    """Mean prediction loss over ``samples`` with the head in eval mode."""
    g = model.config.search_grid
    total = 0.0
    with nx.no_grad():
        for i in range(0, len(samples), batch):
            chunk = samples[i : i + batch]
            z, x, gts, targets = stack_batch(chunk, g)
            _, _, maps = model.forward(z, x, training=False)
            l_pred, _ = pred_loss(maps, targets, gts, cfg)
            total += float(l_pred.data) * len(chunk)
    return total / len(samples)


def calibrate_batchnorm(model: Tracker, samples: Sequence[Sample], batch: int = 32) -> None:
    """Fill the head's running statistics from ``samples`` without touching weights.

    Used to evaluate an untrained model, whose head has never run in train mode.
    """
    g = model.config.search_grid
    with nx.no_grad():
        for i in range(0, len(samples), batch):
            z, x, _, _ = stack_batch(samples[i : i + batch], g)
            model.forward(z, x, training=True)


def template_feature_mse(
    model: Tracker,
    samples: Sequence[Sample],
    sigma: float,
    seed: int,
    grid: pp.GridSpec,
    polarity: str = pp.POINTS_KEEP,
    coordinate_mode: str = pp.NORMALIZED,
    batch: int = 50,
) -> float:
    """Mean masked-vs-plain template token MSE with Cox masks drawn from a fixed stream."""
    rng = _rng(seed, 21)
    vals = []
    with nx.no_grad():
        for i in range(0, len(samples), batch):
            chunk = samples[i : i + batch]
            z = np.stack([s.z for s in chunk])
            x = np.stack([s.x for s in chunk])
            masks = [pp.cox_mask(grid, sigma, rng, polarity, coordinate_mode) for _ in chunk]
            zm = np.stack([pp.apply_mask(zi, m, grid) for zi, m in zip(z, masks)])
            t, b = model.features(z, x)
            tm, bm = model.features(zm, x)
            tz, _ = split_tokens(t, b)
            tzm, _ = split_tokens(tm, bm)
            vals.append(float(orr_loss(tz, tzm).data) * len(chunk))
    return sum(vals) / len(samples)


# ----------------------------------------------------------------------------
# persistence


def save_model(path, model: Tracker, meta: dict = None) -> Path:
    info = {"backbone": model.config.to_dict()}
    info.update(meta or {})
    return save_checkpoint(path, model.state(), info)


def load_model(path) -> Tracker:
    state, meta = load_checkpoint(path)
    if "backbone" not in meta:
        raise ValueError(f"checkpoint {path} carries no backbone config")
    b = dict(meta["backbone"])
    b["template_size"] = tuple(b["template_size"])
    b["search_size"] = tuple(b["search_size"])
    model = Tracker(ViTConfig(**b))
    model.load_state(state)
    return model
