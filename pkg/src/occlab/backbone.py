"""Single-stream ViT over concatenated template and search tokens."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import numerics as nx
from .numerics import Tensor


@dataclass(frozen=True)
class ViTConfig:
    embed_dim: int = 32
    depth: int = 4
    heads: int = 4
    patch: int = 8
    template_size: Tuple[int, int] = (32, 32)
    search_size: Tuple[int, int] = (64, 64)
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.depth < 0:
            raise ValueError("depth must be nonnegative")
        for h, w in (self.template_size, self.search_size):
            if h % self.patch or w % self.patch:
                raise ValueError(f"patch {self.patch} must divide image size {h}x{w}")

    @property
    def template_tokens(self) -> int:
        h, w = self.template_size
        return (h // self.patch) * (w // self.patch)

    @property
    def search_tokens(self) -> int:
        h, w = self.search_size
        return (h // self.patch) * (w // self.patch)

    @property
    def search_grid(self) -> int:
        return self.search_size[0] // self.patch

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TokenBatch:
    """Joint token tensor (B×K×d) plus the index partition into template/search."""

    tokens: Tensor
    template_index: np.ndarray
    search_index: np.ndarray


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """N×C×H×W -> N×(H/P·W/P)×(C·P·P), patches in row-major order."""
    n, c, h, w = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(n, c, gh, patch, gw, patch)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(n, gh * gw, c * patch * patch)


class ViT:
    """Pre-norm transformer encoder with separate template/search positional tables."""

    def __init__(self, config: ViTConfig, dtype=np.float32, prefix: str = "backbone"):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.prefix = prefix
        self.params: Dict[str, Tensor] = {}
        rng = np.random.default_rng(config.seed)
        d = config.embed_dim
        pdim = 3 * config.patch * config.patch
        hidden = d * config.mlp_ratio
        self._add("patch_w", trunc_normal(rng, (pdim, d)))
        self._add("patch_b", np.zeros(d))
        self._add("pos_z", trunc_normal(rng, (config.template_tokens, d)))
        self._add("pos_x", trunc_normal(rng, (config.search_tokens, d)))
        for i in range(config.depth):
            b = f"blocks.{i}."
            self._add(b + "ln1_g", np.ones(d))
            self._add(b + "ln1_b", np.zeros(d))
            self._add(b + "qkv_w", trunc_normal(rng, (d, 3 * d)))
            self._add(b + "qkv_b", np.zeros(3 * d))
            self._add(b + "proj_w", trunc_normal(rng, (d, d)))
            self._add(b + "proj_b", np.zeros(d))
            self._add(b + "ln2_g", np.ones(d))
            self._add(b + "ln2_b", np.zeros(d))
            self._add(b + "fc1_w", trunc_normal(rng, (d, hidden)))
            self._add(b + "fc1_b", np.zeros(hidden))
            self._add(b + "fc2_w", trunc_normal(rng, (hidden, d)))
            self._add(b + "fc2_b", np.zeros(d))
        self._add("norm_g", np.ones(d))
        self._add("norm_b", np.zeros(d))

    def _add(self, name: str, value: np.ndarray) -> None:
        full = f"{self.prefix}.{name}"
        self.params[full] = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=full)

    def p(self, name: str) -> Tensor:
        return self.params[f"{self.prefix}.{name}"]

    # ------------------------------------------------------------------

    def tokenize(self, z: np.ndarray, x: np.ndarray) -> TokenBatch:
        """Embed template and search images (C×H×W or N×C×H×W) into one token sequence."""
        cfg = self.config
        z = np.asarray(z, dtype=self.dtype)
        x = np.asarray(x, dtype=self.dtype)
        if z.ndim == 3:
            z = z[None]
        if x.ndim == 3:
            x = x[None]
        if z.shape[1:] != (3,) + tuple(cfg.template_size):
            raise ValueError(f"template shape {z.shape[1:]} does not match config {cfg.template_size}")
        if x.shape[1:] != (3,) + tuple(cfg.search_size):
            raise ValueError(f"search shape {x.shape[1:]} does not match config {cfg.search_size}")
        if z.shape[0] != x.shape[0]:
            raise ValueError("template and search batch sizes differ")
        pz = Tensor(patchify(z, cfg.patch))
        px = Tensor(patchify(x, cfg.patch))
        w, b = self.p("patch_w"), self.p("patch_b")
        tz = pz @ w + b + self.p("pos_z")
        tx = px @ w + b + self.p("pos_x")
        kz, kx = cfg.template_tokens, cfg.search_tokens
        return TokenBatch(
            tokens=nx.concat([tz, tx], axis=1),
            template_index=np.arange(kz),
            search_index=np.arange(kz, kz + kx),
        )

    def _attention(self, h: Tensor, i: int, mix: bool) -> Tensor:
        cfg = self.config
        n, k, d = h.shape
        heads = cfg.heads
        dh = d // heads
        qkv = h @ self.p(f"blocks.{i}.qkv_w") + self.p(f"blocks.{i}.qkv_b")
        qkv = nx.transpose(qkv.reshape(n, k, 3, heads, dh), (2, 0, 3, 1, 4))
        q, kk, v = qkv[0], qkv[1], qkv[2]
        if mix:
            scores = (q @ nx.transpose(kk, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
            ctx = nx.softmax(scores, axis=-1) @ v
        else:
            # diagnostic mode: each token attends only to itself
            ctx = v
        ctx = nx.transpose(ctx, (0, 2, 1, 3)).reshape(n, k, d)
        return ctx @ self.p(f"blocks.{i}.proj_w") + self.p(f"blocks.{i}.proj_b")

    def forward(self, batch: TokenBatch, attention: bool = True) -> Tensor:
        """Run all blocks and the final layernorm; output has the input's shape."""
        h = batch.tokens
        for i in range(self.config.depth):
            b = f"blocks.{i}."
            a = nx.layernorm(h, self.p(b + "ln1_g"), self.p(b + "ln1_b"))
            h = h + self._attention(a, i, attention)
            m = nx.layernorm(h, self.p(b + "ln2_g"), self.p(b + "ln2_b"))
            m = nx.gelu(m @ self.p(b + "fc1_w") + self.p(b + "fc1_b"))
            h = h + (m @ self.p(b + "fc2_w") + self.p(b + "fc2_b"))
        return nx.layernorm(h, self.p("norm_g"), self.p("norm_b"))

    def __call__(self, z, x, attention: bool = True) -> Tuple[Tensor, TokenBatch]:
        batch = self.tokenize(z, x)
        return self.forward(batch, attention=attention), batch


def split_tokens(out: Tensor, batch: TokenBatch) -> Tuple[Tensor, Tensor]:
    """Gather template and search rows (last-but-one axis) in original patch order."""
    k = out.shape[-2]
    for idx in (batch.template_index, batch.search_index):
        if len(idx) and (idx.min() < 0 or idx.max() >= k):
            raise IndexError("token index out of range")
    z0, z1 = int(batch.template_index[0]), int(batch.template_index[-1]) + 1
    x0, x1 = int(batch.search_index[0]), int(batch.search_index[-1]) + 1
    contiguous = (
        np.array_equal(batch.template_index, np.arange(z0, z1))
        and np.array_equal(batch.search_index, np.arange(x0, x1))
    )
    if contiguous:
        return out[..., z0:z1, :], out[..., x0:x1, :]
    return out[..., batch.template_index, :], out[..., batch.search_index, :]
