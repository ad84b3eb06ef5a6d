"""Conv-BN-ReLU prediction head, box decoding and Gaussian targets."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from . import numerics as nx
from .backbone import trunc_normal
from .numerics import BatchNormState, Tensor

BOX_EPS = 1e-4


@dataclass(frozen=True)
class Box:
    """Centre/size box in coordinates normalized to an image (all in [0, 1])."""

    cx: float
    cy: float
    w: float
    h: float

    def validate(self) -> "Box":
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0 and 0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"box outside [0,1]: {self}")
        return self

    def xyxy(self) -> Tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])


@dataclass
class PredictionMaps:
    """Head outputs for one image or a batch: p (..×G×G), o and s (..×2×G×G)."""

    p: Tensor
    o: Tensor
    s: Tensor

    @property
    def grid(self) -> int:
        return self.p.shape[-1]


def head_channels(embed_dim: int, stages: int = 4, floor: int = 8) -> List[int]:
    chans = [embed_dim]
    for _ in range(stages):
        chans.append(max(floor, chans[-1] // 2))
    return chans


class Head:
    def __init__(self, embed_dim: int, seed: int = 0, dtype=np.float32, prefix: str = "head", stages: int = 4):
        self.dtype = np.dtype(dtype)
        self.prefix = prefix
        self.channels = head_channels(embed_dim, stages)
        self.params: Dict[str, Tensor] = {}
        self.bn: List[BatchNormState] = []
        rng = np.random.default_rng(seed + 7919)
        for i, (ci, co) in enumerate(zip(self.channels[:-1], self.channels[1:])):
            # He init for ReLU stacks
            self._add(f"conv{i}_w", rng.standard_normal((co, ci, 3, 3)) * math.sqrt(2.0 / (ci * 9)))
            self._add(f"bn{i}_g", np.ones(co))
            self._add(f"bn{i}_b", np.zeros(co))
            self.bn.append(BatchNormState(co, dtype=self.dtype))
        c = self.channels[-1]
        for branch, out in (("cls", 1), ("off", 2), ("size", 2)):
            self._add(f"{branch}_w", trunc_normal(rng, (out, c, 1, 1), std=0.1))
            self._add(f"{branch}_b", np.zeros(out))

    def _add(self, name: str, value) -> None:
        full = f"{self.prefix}.{name}"
        self.params[full] = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=full)

    def p(self, name: str) -> Tensor:
        return self.params[f"{self.prefix}.{name}"]

    def buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for i, st in enumerate(self.bn):
            out[f"{self.prefix}.bn{i}.running_mean"] = st.running_mean
            out[f"{self.prefix}.bn{i}.running_var"] = st.running_var
            out[f"{self.prefix}.bn{i}.num_batches"] = np.array([st.num_batches], dtype=self.dtype)
        return out

    def load_buffers(self, values: Dict[str, np.ndarray]) -> None:
        for i, st in enumerate(self.bn):
            st.running_mean = np.array(values[f"{self.prefix}.bn{i}.running_mean"], dtype=self.dtype)
            st.running_var = np.array(values[f"{self.prefix}.bn{i}.running_var"], dtype=self.dtype)
            st.num_batches = int(values[f"{self.prefix}.bn{i}.num_batches"][0])

    def forward(self, search_tokens: Tensor, training: bool = False) -> PredictionMaps:
        """Map N×G²×d search tokens (row-major patches) to prediction maps."""
        if search_tokens.ndim == 2:
            search_tokens = search_tokens.reshape(1, *search_tokens.shape)
        n, k, d = search_tokens.shape
        g = int(round(math.sqrt(k)))
        if g * g != k:
            raise ValueError(f"search token count {k} is not a square")
        h = nx.transpose(search_tokens, (0, 2, 1)).reshape(n, d, g, g)
        for i, st in enumerate(self.bn):
            h = nx.conv2d(h, self.p(f"conv{i}_w"))
            h = nx.batchnorm(h, self.p(f"bn{i}_g"), self.p(f"bn{i}_b"), st, training)
            h = nx.relu(h)
        cls = nx.sigmoid(nx.conv2d(h, self.p("cls_w"), self.p("cls_b")))
        off = nx.sigmoid(nx.conv2d(h, self.p("off_w"), self.p("off_b")))
        size = nx.sigmoid(nx.conv2d(h, self.p("size_w"), self.p("size_b")))
        return PredictionMaps(p=cls.reshape(n, g, g), o=off, s=size)

    __call__ = forward


def argmax_cell(p: np.ndarray) -> Tuple[int, int]:
    """Row-major first occurrence of the maximum."""
    flat = int(np.argmax(p))
    return divmod(flat, p.shape[-1])


def decode_box(p: np.ndarray, o: np.ndarray, s: np.ndarray) -> Box:
    """Box from single-image maps p (G×G), o, s (2×G×G)."""
    p, o, s = np.asarray(p), np.asarray(o), np.asarray(s)
    g = p.shape[-1]
    r, c = argmax_cell(p)
    cx = (c + float(o[0, r, c])) / g
    cy = (r + float(o[1, r, c])) / g
    w = min(max(float(s[0, r, c]), BOX_EPS), 1.0)
    h = min(max(float(s[1, r, c]), BOX_EPS), 1.0)
    return Box(min(max(cx, 0.0), 1.0), min(max(cy, 0.0), 1.0), w, h)


def decode_maps(maps: PredictionMaps) -> List[Box]:
    p, o, s = maps.p.data, maps.o.data, maps.s.data
    if p.ndim == 2:
        return [decode_box(p, o, s)]
    return [decode_box(p[i], o[i], s[i]) for i in range(p.shape[0])]


@dataclass
class Targets:
    heatmap: np.ndarray
    offset: Tuple[float, float]
    size: Tuple[float, float]
    center_cell: Tuple[int, int]


def gaussian_std(w: float, h: float, grid: int) -> float:
    return max(1.0, math.sqrt(w * h) * grid / 6.0)


def make_targets(gt: Box, grid: int) -> Targets:
    gt.validate()
    fx, fy = gt.cx * grid, gt.cy * grid
    col = min(int(math.floor(fx)), grid - 1)
    row = min(int(math.floor(fy)), grid - 1)
    std = gaussian_std(gt.w, gt.h, grid)
    rr, cc = np.mgrid[0:grid, 0:grid]
    heat = np.exp(-((rr - row) ** 2 + (cc - col) ** 2) / (2 * std * std))
    return Targets(heatmap=heat, offset=(fx - col, fy - row), size=(gt.w, gt.h), center_cell=(row, col))
