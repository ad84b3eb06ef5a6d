"""One-pass evaluation: centre-error precision and IoU success AUC."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .head import Box
from .losses import iou
from .synth import CropConfig, Scene, SceneConfig, box_pixels, crop_resize, crop_side, crop_to_frame

SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)
PAPER_SEARCH_SIZE = 256
PAPER_PRECISION_PX = 20.0
MIN_BOX_PX = 4.0


def desk_threshold(search_size: int) -> float:
    """Precision threshold scaled from 20 px at a 256-px search region."""
    return PAPER_PRECISION_PX * search_size / PAPER_SEARCH_SIZE


@dataclass
class FrameResult:
    pred: Box
    gt: Box
    center_error: float
    iou: float
    occluded: bool


@dataclass
class SequenceResult:
    name: str
    frames: List[FrameResult] = field(default_factory=list)

    @property
    def center_errors(self) -> np.ndarray:
        return np.array([f.center_error for f in self.frames])

    @property
    def ious(self) -> np.ndarray:
        return np.array([f.iou for f in self.frames])


def center_error(pred: Box, gt: Box, image_size: Tuple[int, int]) -> float:
    """Euclidean distance between box centres in pixels; ``image_size`` is (H, W)."""
    h, w = image_size
    return math.hypot((pred.cx - gt.cx) * w, (pred.cy - gt.cy) * h)


def precision_at(errors: Sequence[float], tau: float) -> float:
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        raise ValueError("no frames to score")
    return float(np.mean(errors <= tau))


def success_auc(ious: Sequence[float]) -> float:
    """Mean over the 21 thresholds 0, 0.05, ..., 1 of the fraction of frames with IoU > threshold."""
    ious = np.asarray(ious, dtype=float)
    if ious.size == 0:
        raise ValueError("no frames to score")
    return float(np.mean([np.mean(ious > t) for t in SUCCESS_THRESHOLDS]))


Predictor = Callable[[np.ndarray, np.ndarray], List[Box]]


def track_scenes(
    predict: Optional[Predictor],
    scenes: Sequence[Scene],
    crop: CropConfig,
    names: Optional[Sequence[str]] = None,
    oracle: bool = False,
) -> List[SequenceResult]:
    """Initialize every scene on its frame 0 and track causally; templates are never updated.

    Scenes advance in lockstep so one batched ``predict(z, x)`` call serves
    frame ``t`` of all scenes still running.  ``predict`` takes N×3×H×W
    template and search stacks and returns one box per row, normalized to its
    search crop.  Frame ``t`` of a scene only sees that scene's frames up to
    ``t`` and its own previous prediction.  With ``oracle=True`` the ground
    truth of the current frame is used as the prediction (a sanity baseline).
    """
    names = list(names) if names is not None else [f"seq{i:03d}" for i in range(len(scenes))]
    results = [SequenceResult(n) for n in names]
    templates, prev = [], []
    for scene in scenes:
        first = scene.frame(0)
        cx, cy, w, h = box_pixels(first.gt, scene.config.canvas)
        templates.append(
            crop_resize(first.image, (cx, cy), crop_side(w, h, crop.template_context), crop.template_size)
        )
        prev.append((cx, cy, w, h))
    longest = max((len(s) for s in scenes), default=0)
    for t in range(1, longest):
        live = [i for i, s in enumerate(scenes) if t < len(s)]
        frames = {i: scenes[i].frame(t) for i in live}
        if oracle:
            preds = {i: frames[i].gt for i in live}
        else:
            windows = {}
            for i in live:
                center = prev[i][:2]
                side = crop_side(prev[i][2], prev[i][3], crop.search_context)
                windows[i] = (center, side)
            z = np.stack([templates[i] for i in live])
            x = np.stack([crop_resize(frames[i].image, *windows[i], crop.search_size) for i in live])
            boxes = predict(z, x)
            preds = {}
            for i, box in zip(live, boxes):
                canvas = scenes[i].config.canvas
                pcx, pcy, pw, ph = crop_to_frame(box, *windows[i])
                pw = min(max(pw, MIN_BOX_PX), canvas[1])
                ph = min(max(ph, MIN_BOX_PX), canvas[0])
                pcx = min(max(pcx, 0.0), canvas[1])
                pcy = min(max(pcy, 0.0), canvas[0])
                prev[i] = (pcx, pcy, pw, ph)
                preds[i] = Box(pcx / canvas[1], pcy / canvas[0], pw / canvas[1], ph / canvas[0])
        for i in live:
            frame, pred = frames[i], preds[i]
            results[i].frames.append(
                FrameResult(
                    pred=pred,
                    gt=frame.gt,
                    center_error=center_error(pred, frame.gt, scenes[i].config.canvas),
                    iou=iou(pred, frame.gt),
                    occluded=frame.occluded_fraction > 0.0,
                )
            )
    return results


def track_scene(
    predict: Optional[Predictor], scene: Scene, crop: CropConfig, name: str = "", oracle: bool = False
) -> SequenceResult:
    """Single-scene form of :func:`track_scenes`."""
    return track_scenes(predict, [scene], crop, [name], oracle)[0]


def summarize(results: Sequence[SequenceResult], tau: float) -> Dict[str, Dict[str, float]]:
    frames = [f for r in results for f in r.frames]
    occ = [f for f in frames if f.occluded]

    def block(fs):
        if not fs:
            return {"frames": 0, "precision": float("nan"), "success": float("nan")}
        return {
            "frames": len(fs),
            "precision": precision_at([f.center_error for f in fs], tau),
            "success": success_auc([f.iou for f in fs]),
        }

    return {"overall": block(frames), "occlusion": block(occ), "threshold_px": tau}


def model_predictor(model) -> Predictor:
    return model.predict


def run_ope(model, configs: Sequence[SceneConfig], crop: Optional[CropConfig] = None, oracle: bool = False):
    """Evaluate ``model`` on every sequence; returns (per-sequence results, metrics)."""
    if crop is None:
        crop = CropConfig(
            template_size=model.config.template_size[0], search_size=model.config.search_size[0]
        )
    predict = model_predictor(model) if model is not None else None
    results = track_scenes(predict, [Scene(cfg) for cfg in configs], crop, oracle=oracle)
    return results, summarize(results, desk_threshold(crop.search_size))


def metrics_json(metrics: dict) -> str:
    return json.dumps(metrics, indent=2, sort_keys=True)


def frames_csv(results: Sequence[SequenceResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(
        ["sequence", "frame", "pred_cx", "pred_cy", "pred_w", "pred_h",
         "gt_cx", "gt_cy", "gt_w", "gt_h", "center_error", "iou", "occluded"]
    )
    for r in results:
        for i, f in enumerate(r.frames, start=1):
            w.writerow(
                [r.name, i, *map(repr, (f.pred.cx, f.pred.cy, f.pred.w, f.pred.h)),
                 *map(repr, (f.gt.cx, f.gt.cy, f.gt.w, f.gt.h)),
                 repr(f.center_error), repr(f.iou), int(f.occluded)]
            )
    return buf.getvalue()
