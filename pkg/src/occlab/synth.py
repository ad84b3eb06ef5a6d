"""Deterministic synthetic tracking scenes with scripted occlusions.

A scene is a textured rectangle drifting over a textured background.
Occluders are background-like patches pinned to one side (or the centre)
of the target during scripted frame intervals.  Frames are rendered on
demand, so a bank of scenes is cheap to keep in memory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .head import Box

OCCLUDER_SHAPES = ("left", "right", "top", "bottom", "center")
OCCLUDER_MARGIN = 4


@dataclass(frozen=True)
class OccluderSpec:
    shape: str
    coverage: float
    start: int
    end: int

    def validate(self) -> None:
        if self.shape not in OCCLUDER_SHAPES:
            raise ValueError(f"unknown occluder shape {self.shape!r}")
        if not 0.0 <= self.coverage <= 1.0:
            raise ValueError("occluder coverage must lie in [0, 1]")
        if self.end < self.start:
            raise ValueError("occluder interval ends before it starts")

    def active(self, t: int) -> bool:
        return self.start <= t < self.end


@dataclass(frozen=True)
class SceneConfig:
    canvas: Tuple[int, int] = (128, 128)
    size_range: Tuple[int, int] = (16, 28)
    speed_range: Tuple[float, float] = (0.5, 2.0)
    jitter: float = 0.3
    occluders: Tuple[OccluderSpec, ...] = ()
    length: int = 40
    seed: int = 0

    def validate(self) -> "SceneConfig":
        h, w = self.canvas
        lo, hi = self.size_range
        if lo < 2 or hi < lo:
            raise ValueError("invalid target size range")
        if hi + 2 * 2 >= min(h, w):
            raise ValueError("target does not fit inside the canvas")
        if self.length < 1:
            raise ValueError("sequence length must be positive")
        for occ in self.occluders:
            occ.validate()
        return self


@dataclass
class FrameRecord:
    image: np.ndarray  # 3×H×W float32 in [0, 1]
    gt: Box  # normalized to the canvas
    occluded_fraction: float


@dataclass
class Sample:
    z: np.ndarray
    x: np.ndarray
    gt: Box  # normalized to the search crop
    occluded_fraction: float = 0.0


@dataclass(frozen=True)
class CropConfig:
    template_size: int = 32
    search_size: int = 64
    template_context: float = 2.0
    search_context: float = 4.0
    center_jitter: float = 0.0  # max centre shift, in units of sqrt(w*h)
    scale_jitter: float = 0.0  # max |log| scale change of the search crop


def value_noise(rng: np.random.Generator, shape: Tuple[int, int], cell: int, lo, hi) -> np.ndarray:
    """3×H×W smooth random texture: random lattice values, bilinearly upsampled."""
    h, w = shape
    gh, gw = h // cell + 2, w // cell + 2
    lattice = rng.uniform(lo, hi, size=(3, gh, gw))
    ys = (np.arange(h) + 0.5) / cell
    xs = (np.arange(w) + 0.5) / cell
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = lattice[:, y0][:, :, x0]
    b = lattice[:, y0][:, :, x0 + 1]
    c = lattice[:, y0 + 1][:, :, x0]
    d = lattice[:, y0 + 1][:, :, x0 + 1]
    return ((a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy).astype(np.float32)


class Scene:
    """Trajectory, textures and occluder schedule for one sequence."""

    def __init__(self, config: SceneConfig):
        self.config = config.validate()
        self._clear: Optional[List[int]] = None
        ss = np.random.SeedSequence(config.seed)
        traj_ss, tex_ss, occ_ss = ss.spawn(3)
        self._build_trajectory(np.random.default_rng(traj_ss))
        tex = np.random.default_rng(tex_ss)
        h, w = config.canvas
        base = tex.uniform(0.25, 0.55, size=(3, 1, 1))
        self.background = np.clip(value_noise(tex, (h, w), 16, -0.15, 0.15) + base, 0, 1).astype(np.float32)
        tone = tex.uniform(0.0, 1.0, size=(3, 1, 1))
        self.target_tex = np.clip(value_noise(tex, (32, 32), 6, -0.3, 0.3) + tone, 0, 1).astype(np.float32)
        orng = np.random.default_rng(occ_ss)
        obase = orng.uniform(0.25, 0.55, size=(3, 1, 1))
        self.occluder_tex = np.clip(value_noise(orng, (h, w), 8, -0.15, 0.15) + obase, 0, 1).astype(np.float32)

    def _build_trajectory(self, rng: np.random.Generator) -> None:
        cfg = self.config
        hgt, wid = cfg.canvas
        lo, hi = cfg.size_range
        self.size = (int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1)))  # (w, h)
        tw, th = self.size
        xmin, xmax = tw / 2 + 2, wid - tw / 2 - 2
        ymin, ymax = th / 2 + 2, hgt - th / 2 - 2
        pos = np.array([rng.uniform(xmin, xmax), rng.uniform(ymin, ymax)])
        ang = rng.uniform(0, 2 * math.pi)
        speed = rng.uniform(*cfg.speed_range)
        vel = speed * np.array([math.cos(ang), math.sin(ang)])
        centers = []
        for _ in range(cfg.length):
            centers.append(pos.copy())
            pos = pos + vel + rng.normal(0.0, cfg.jitter, size=2)
            for k, (a, b) in enumerate(((xmin, xmax), (ymin, ymax))):
                if pos[k] < a:
                    pos[k] = 2 * a - pos[k]
                    vel[k] = -vel[k]
                if pos[k] > b:
                    pos[k] = 2 * b - pos[k]
                    vel[k] = -vel[k]
                pos[k] = min(max(pos[k], a), b)
        self.centers = np.array(centers)

    def target_rect(self, t: int) -> Tuple[int, int, int, int]:
        """Pixel-aligned (x0, y0, x1, y1) of the target in frame ``t``."""
        tw, th = self.size
        cx, cy = self.centers[t]
        x0 = int(round(cx - tw / 2))
        y0 = int(round(cy - th / 2))
        return x0, y0, x0 + tw, y0 + th

    def occluder_rects(self, t: int) -> List[Tuple[int, int, int, int]]:
        x0, y0, x1, y1 = self.target_rect(t)
        tw, th = x1 - x0, y1 - y0
        m = OCCLUDER_MARGIN
        rects = []
        for occ in self.config.occluders:
            if not occ.active(t) or occ.coverage <= 0:
                continue
            if occ.shape == "left":
                rects.append((x0 - m, y0 - m, x0 + int(round(occ.coverage * tw)), y1 + m))
            elif occ.shape == "right":
                rects.append((x1 - int(round(occ.coverage * tw)), y0 - m, x1 + m, y1 + m))
            elif occ.shape == "top":
                rects.append((x0 - m, y0 - m, x1 + m, y0 + int(round(occ.coverage * th))))
            elif occ.shape == "bottom":
                rects.append((x0 - m, y1 - int(round(occ.coverage * th)), x1 + m, y1 + m))
            else:
                s = math.sqrt(occ.coverage)
                ow, oh = int(round(s * tw)), int(round(s * th))
                ox0 = x0 + (tw - ow) // 2
                oy0 = y0 + (th - oh) // 2
                rects.append((ox0, oy0, ox0 + ow, oy0 + oh))
        return rects

    def occluded_fraction(self, t: int) -> float:
        """Target area covered by the union of active occluders, from rectangle geometry."""
        x0, y0, x1, y1 = self.target_rect(t)
        rects = [
            (max(a, x0), max(b, y0), min(c, x1), min(d, y1))
            for a, b, c, d in self.occluder_rects(t)
        ]
        rects = [r for r in rects if r[2] > r[0] and r[3] > r[1]]
        if not rects:
            return 0.0
        # union area by coordinate compression
        xs = sorted({v for r in rects for v in (r[0], r[2])})
        ys = sorted({v for r in rects for v in (r[1], r[3])})
        area = 0
        for i in range(len(xs) - 1):
            for j in range(len(ys) - 1):
                mx, my = xs[i], ys[j]
                if any(r[0] <= mx < r[2] and r[1] <= my < r[3] for r in rects):
                    area += (xs[i + 1] - xs[i]) * (ys[j + 1] - ys[j])
        return area / float((x1 - x0) * (y1 - y0))

    def render(self, t: int) -> np.ndarray:
        img = self.background.copy()
        hgt, wid = self.config.canvas
        x0, y0, x1, y1 = self.target_rect(t)
        tw, th = x1 - x0, y1 - y0
        ty = np.minimum(((np.arange(th) + 0.5) / th * 32).astype(int), 31)
        tx = np.minimum(((np.arange(tw) + 0.5) / tw * 32).astype(int), 31)
        patch = self.target_tex[:, ty][:, :, tx]
        cy0, cy1, cx0, cx1 = max(y0, 0), min(y1, hgt), max(x0, 0), min(x1, wid)
        img[:, cy0:cy1, cx0:cx1] = patch[:, cy0 - y0 : cy1 - y0, cx0 - x0 : cx1 - x0]
        for a, b, c, d in self.occluder_rects(t):
            a, b, c, d = max(a, 0), max(b, 0), min(c, wid), min(d, hgt)
            if c > a and d > b:
                img[:, b:d, a:c] = self.occluder_tex[:, b:d, a:c]
        return img

    def clear_frames(self) -> List[int]:
        if self._clear is None:
            self._clear = [t for t in range(len(self)) if self.occluded_fraction(t) == 0.0]
        return self._clear

    def gt_box(self, t: int) -> Box:
        hgt, wid = self.config.canvas
        x0, y0, x1, y1 = self.target_rect(t)
        return Box((x0 + x1) / 2 / wid, (y0 + y1) / 2 / hgt, (x1 - x0) / wid, (y1 - y0) / hgt)

    def frame(self, t: int) -> FrameRecord:
        return FrameRecord(self.render(t), self.gt_box(t), self.occluded_fraction(t))

    def __len__(self) -> int:
        return self.config.length


def generate_sequence(config: SceneConfig) -> List[FrameRecord]:
    scene = Scene(config)
    return [scene.frame(t) for t in range(config.length)]


# ----------------------------------------------------------------------------
# cropping


def crop_resize(image: np.ndarray, center: Tuple[float, float], side: float, out: int) -> np.ndarray:
    """Square crop of ``side`` pixels around ``center`` (x, y), bilinearly resized to out×out.

    Coordinates outside the image replicate the border.
    """
    _, h, w = image.shape
    cx, cy = center
    coords = cx - side / 2 + (np.arange(out) + 0.5) * side / out - 0.5
    xs = np.clip(coords, 0, w - 1)
    coords_y = cy - side / 2 + (np.arange(out) + 0.5) * side / out - 0.5
    ys = np.clip(coords_y, 0, h - 1)
    x0 = np.minimum(np.floor(xs).astype(int), w - 2)
    y0 = np.minimum(np.floor(ys).astype(int), h - 2)
    fx = (xs - x0)[None, None, :]
    fy = (ys - y0)[None, :, None]
    rows0 = image[:, y0]
    rows1 = image[:, y0 + 1]
    top = rows0[:, :, x0] * (1 - fx) + rows0[:, :, x0 + 1] * fx
    bot = rows1[:, :, x0] * (1 - fx) + rows1[:, :, x0 + 1] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


def box_to_crop(box_px: Tuple[float, float, float, float], center, side) -> Box:
    """Express a pixel (cx, cy, w, h) box in the normalized frame of a crop."""
    cx, cy, w, h = box_px
    ox, oy = center[0] - side / 2, center[1] - side / 2
    ncx = min(max((cx - ox) / side, 0.0), 1.0)
    ncy = min(max((cy - oy) / side, 0.0), 1.0)
    return Box(ncx, ncy, min(max(w / side, 1e-4), 1.0), min(max(h / side, 1e-4), 1.0))


def crop_to_frame(box: Box, center, side) -> Tuple[float, float, float, float]:
    """Inverse of :func:`box_to_crop`: crop-normalized box back to pixel (cx, cy, w, h)."""
    ox, oy = center[0] - side / 2, center[1] - side / 2
    return (ox + box.cx * side, oy + box.cy * side, box.w * side, box.h * side)


def box_pixels(box: Box, canvas: Tuple[int, int]) -> Tuple[float, float, float, float]:
    h, w = canvas
    return (box.cx * w, box.cy * h, box.w * w, box.h * h)


def crop_side(w: float, h: float, context: float) -> float:
    return context * math.sqrt(w * h)


def make_sample(
    frame: FrameRecord,
    config: CropConfig,
    rng: Optional[np.random.Generator] = None,
    search_frame: Optional[FrameRecord] = None,
) -> Sample:
    """Template from ``frame``; search crop from ``search_frame`` (defaults to the same frame)."""
    search_frame = search_frame or frame
    canvas = frame.image.shape[1:]
    zcx, zcy, zw, zh = box_pixels(frame.gt, canvas)
    if zw <= 0 or zh <= 0:
        raise ValueError("degenerate ground-truth box")
    z_side = crop_side(zw, zh, config.template_context)
    z = crop_resize(frame.image, (zcx, zcy), z_side, config.template_size)

    scx, scy, sw, sh = box_pixels(search_frame.gt, canvas)
    x_side = crop_side(sw, sh, config.search_context)
    if rng is not None and (config.center_jitter > 0 or config.scale_jitter > 0):
        scale = math.exp(rng.uniform(-config.scale_jitter, config.scale_jitter))
        shift = rng.uniform(-config.center_jitter, config.center_jitter, size=2) * math.sqrt(sw * sh)
        x_side *= scale
        center = (scx + shift[0], scy + shift[1])
    else:
        center = (scx, scy)
    x = crop_resize(search_frame.image, center, x_side, config.search_size)
    gt = box_to_crop((scx, scy, sw, sh), center, x_side)
    return Sample(z=z, x=x, gt=gt, occluded_fraction=search_frame.occluded_fraction)


# ----------------------------------------------------------------------------
# scene banks


def random_occluders(rng: np.random.Generator, length: int, prob: float) -> Tuple[OccluderSpec, ...]:
    if rng.random() >= prob or length < 4:
        return ()
    start = int(rng.integers(1, max(2, length // 2)))
    end = int(min(length, start + rng.integers(length // 4, length // 2 + 1)))
    shape = OCCLUDER_SHAPES[int(rng.integers(len(OCCLUDER_SHAPES)))]
    return (OccluderSpec(shape, float(rng.uniform(0.3, 0.7)), start, end),)


def scene_bank(
    count: int, seed: int, length: int = 40, occluder_prob: float = 0.3, canvas=(128, 128)
) -> List[Scene]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    scenes = []
    for i in range(count):
        occ = random_occluders(rng, length, occluder_prob)
        scenes.append(Scene(SceneConfig(canvas=canvas, occluders=occ, length=length, seed=int(rng.integers(2**63)))))
    return scenes


def draw_pair(scenes: Sequence[Scene], rng: np.random.Generator, crop: CropConfig, max_gap: int = 10) -> Sample:
    """Template from an unoccluded frame, search from a nearby frame of the same scene."""
    scene = scenes[int(rng.integers(len(scenes)))]
    n = len(scene)
    clear = scene.clear_frames()
    tz = clear[int(rng.integers(len(clear)))] if clear else 0
    lo, hi = max(0, tz - max_gap), min(n - 1, tz + max_gap)
    tx = int(rng.integers(lo, hi + 1))
    return make_sample(scene.frame(tz), crop, rng, search_frame=scene.frame(tx))


def benchmark_configs(count: int, seed: int, length: int = 40, canvas=(128, 128)) -> List[SceneConfig]:
    """Evaluation sequences, each with one scripted occlusion interval after the first frames."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    configs = []
    for i in range(count):
        start = int(rng.integers(length // 4, length // 2))
        end = int(start + rng.integers(length // 4, length // 2))
        shape = OCCLUDER_SHAPES[i % len(OCCLUDER_SHAPES)]
        occ = (OccluderSpec(shape, float(rng.uniform(0.4, 0.7)), start, min(end, length)),)
        configs.append(SceneConfig(canvas=canvas, occluders=occ, length=length, seed=int(rng.integers(2**63))))
    return configs


def write_pgm(path, channel: np.ndarray) -> None:
    """One channel in [0, 1] as plain-text PGM with maxval 255."""
    vals = np.clip(np.round(channel * 255), 0, 255).astype(int)
    h, w = vals.shape
    with open(path, "w") as fh:
        fh.write(f"P2\n{w} {h}\n255\n")
        for row in vals:
            fh.write(" ".join(map(str, row)) + "\n")
