"""Backbone + head bundle used by training and evaluation."""

from __future__ import annotations

from dataclasses import replace
from typing import Dict, List, Tuple

import numpy as np

from . import numerics as nx
from .backbone import TokenBatch, ViT, ViTConfig, split_tokens
from .head import Box, Head, PredictionMaps, decode_maps
from .numerics import Tensor


class Tracker:
    def __init__(self, config: ViTConfig, dtype=np.float32):
        self.config = config
        self.backbone = ViT(config, dtype=dtype)
        self.head = Head(config.embed_dim, seed=config.seed, dtype=dtype)

    @property
    def params(self) -> Dict[str, Tensor]:
        out = dict(self.backbone.params)
        out.update(self.head.params)
        return out

    def buffers(self) -> Dict[str, np.ndarray]:
        return self.head.buffers()

    def state(self) -> Dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        out.update(self.buffers())
        return out

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        params = self.params
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)[:3]}")
        for name, t in params.items():
            arr = np.asarray(state[name], dtype=t.dtype)
            if arr.shape != t.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {t.shape}")
            t.data = arr.copy()
        self.head.load_buffers(state)

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None

    def features(self, z, x) -> Tuple[Tensor, TokenBatch]:
        return self.backbone(z, x)

    def forward(self, z, x, training: bool = False) -> Tuple[Tensor, TokenBatch, PredictionMaps]:
        tokens, batch = self.backbone(z, x)
        _, search = split_tokens(tokens, batch)
        maps = self.head(search, training=training)
        return tokens, batch, maps

    def predict(self, z, x) -> List[Box]:
        with nx.no_grad():
            _, _, maps = self.forward(z, x, training=False)
        return decode_maps(maps)


def build_tracker(config: ViTConfig, depth: int = None, seed: int = None, dtype=np.float32) -> Tracker:
    changes = {}
    if depth is not None:
        changes["depth"] = depth
    if seed is not None:
        changes["seed"] = seed
    return Tracker(replace(config, **changes) if changes else config, dtype=dtype)
