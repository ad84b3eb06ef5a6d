"""JSON experiment configuration: defaults, strict parsing, overrides and hashing."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, Optional

from . import pointproc as pp
from .backbone import ViTConfig
from .losses import LossConfig
from .synth import CropConfig
from .train import KD_MODES, TrainConfig


class ConfigError(ValueError):
    """Invalid configuration document or override."""


@dataclass
class GridSection:
    block: int = 8


@dataclass
class IntensitySection:
    coordinate_mode: str = pp.NORMALIZED
    bandwidth: float = 1.0
    # explicit Poisson mean for simulate-pp; null derives it from the mask ratio
    varsigma: Optional[float] = None


@dataclass
class MaskSection:
    sigma: float = 0.3
    polarity: str = pp.POINTS_KEEP


@dataclass
class BackboneSection:
    embed_dim: int = 32
    teacher_depth: int = 4
    student_depth: int = 2
    heads: int = 4
    patch: int = 8
    template_size: int = 32
    search_size: int = 64
    mlp_ratio: int = 4


@dataclass
class LossSection:
    lambda_iou: float = 2.0
    lambda_l1: float = 5.0
    gamma: float = 2.0e-4
    alpha: float = 1.0
    beta: float = 1.0
    momentum: float = 0.99
    focal_a: float = 2.0
    focal_c: float = 4.0


@dataclass
class TrainSection:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-4
    lr_drop_at: float = 0.8
    use_orr: bool = True
    kd_mode: str = "afkd"
    train_scenes: int = 256
    occluder_prob: float = 0.3
    heldout_samples: int = 128
    data_seed: int = 1000
    log_every: int = 1


@dataclass
class SynthSection:
    template_context: float = 2.0
    search_context: float = 4.0
    center_jitter: float = 0.75
    scale_jitter: float = 0.15


@dataclass
class EvalSection:
    sequences: int = 20
    length: int = 40
    seed: int = 555


@dataclass
class SimulateSection:
    simulations: int = 20000
    dumps: int = 8


@dataclass
class ExperimentConfig:
    seed: int = 0
    grid: GridSection = field(default_factory=GridSection)
    intensity: IntensitySection = field(default_factory=IntensitySection)
    mask: MaskSection = field(default_factory=MaskSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    synth: SynthSection = field(default_factory=SynthSection)
    eval: EvalSection = field(default_factory=EvalSection)
    simulate: SimulateSection = field(default_factory=SimulateSection)

    # ------------------------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        """Hash of the canonical JSON form; identical configs share a run directory."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]

    def validate(self) -> "ExperimentConfig":
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.intensity.coordinate_mode not in (pp.NORMALIZED, pp.RAW):
            raise ConfigError(f"intensity.coordinate_mode must be normalized or raw, got {self.intensity.coordinate_mode!r}")
        if self.intensity.bandwidth <= 0:
            raise ConfigError("intensity.bandwidth must be positive")
        if self.intensity.varsigma is not None and self.intensity.varsigma < 0:
            raise ConfigError("intensity.varsigma must be nonnegative")
        if not 0.0 <= self.mask.sigma <= 1.0:
            raise ConfigError(f"mask.sigma must lie in [0, 1], got {self.mask.sigma}")
        if self.mask.polarity not in (pp.POINTS_KEEP, pp.POINTS_MASK):
            raise ConfigError(f"mask.polarity must be points-keep or points-mask, got {self.mask.polarity!r}")
        if self.train.kd_mode not in KD_MODES:
            raise ConfigError(f"train.kd_mode must be one of {KD_MODES}")
        if self.simulate.simulations < 1 or self.simulate.dumps < 0:
            raise ConfigError("simulate.simulations must be positive and simulate.dumps nonnegative")
        if self.eval.sequences < 1 or self.eval.length < 2:
            raise ConfigError("eval needs at least one sequence of two frames")
        if self.backbone.student_depth < 0 or self.backbone.teacher_depth < 0:
            raise ConfigError("backbone depths must be nonnegative")
        try:
            self.grid_spec()
            self.train_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    # ------------------------------------------------------------------

    def grid_spec(self) -> pp.GridSpec:
        t = self.backbone.template_size
        return pp.GridSpec(t, t, self.grid.block)

    def vit_config(self) -> ViTConfig:
        b = self.backbone
        return ViTConfig(
            embed_dim=b.embed_dim,
            depth=b.teacher_depth,
            heads=b.heads,
            patch=b.patch,
            template_size=(b.template_size, b.template_size),
            search_size=(b.search_size, b.search_size),
            mlp_ratio=b.mlp_ratio,
            seed=self.seed,
        )

    def crop_config(self) -> CropConfig:
        s = self.synth
        return CropConfig(
            template_size=self.backbone.template_size,
            search_size=self.backbone.search_size,
            template_context=s.template_context,
            search_context=s.search_context,
            center_jitter=s.center_jitter,
            scale_jitter=s.scale_jitter,
        )

    def train_config(self) -> TrainConfig:
        t, lo = self.train, self.loss
        return TrainConfig(
            steps=t.steps,
            batch_size=t.batch_size,
            lr=t.lr,
            weight_decay=t.weight_decay,
            lr_drop_at=t.lr_drop_at,
            sigma=self.mask.sigma,
            polarity=self.mask.polarity,
            coordinate_mode=self.intensity.coordinate_mode,
            bandwidth=self.intensity.bandwidth,
            mask_block=self.grid.block,
            use_orr=t.use_orr,
            kd_mode=t.kd_mode,
            student_depth=self.backbone.student_depth,
            train_scenes=t.train_scenes,
            occluder_prob=t.occluder_prob,
            heldout_samples=t.heldout_samples,
            data_seed=t.data_seed,
            seed=self.seed,
            log_every=t.log_every,
            loss=LossConfig(
                lambda_iou=lo.lambda_iou,
                lambda_l1=lo.lambda_l1,
                gamma=lo.gamma,
                alpha=lo.alpha,
                beta=lo.beta,
                sigma=self.mask.sigma,
                momentum=lo.momentum,
                focal_a=lo.focal_a,
                focal_c=lo.focal_c,
            ),
            backbone=self.vit_config(),
            crop=self.crop_config(),
        )


# ----------------------------------------------------------------------------
# parsing


def _coerce(value: Any, current: Any, where: str) -> Any:
    """Check a JSON value against the type of the default it replaces."""
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if isinstance(current, float) or current is None:
        if value is None and current is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    raise ConfigError(f"{where} has an unsupported type")


def _merge(obj, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    known = {f.name: f for f in fields(obj)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    changes = {}
    for key, value in data.items():
        current = getattr(obj, key)
        path = f"{where}.{key}" if where else key
        if is_dataclass(current):
            changes[key] = _merge(current, value, path)
        else:
            changes[key] = _coerce(value, current, path)
    return replace(obj, **changes)


def from_dict(data: dict) -> ExperimentConfig:
    return _merge(ExperimentConfig(), data, "")


def load_config(path: Optional[str]) -> ExperimentConfig:
    """Read a config file (or take all defaults when ``path`` is None)."""
    if path is None:
        return ExperimentConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from None
    return from_dict(data)


OVERRIDES = {
    "seed": ("seed",),
    "sigma": ("mask", "sigma"),
    "polarity": ("mask", "polarity"),
    "coord": ("intensity", "coordinate_mode"),
    "alpha": ("loss", "alpha"),
    "beta": ("loss", "beta"),
    "gamma": ("loss", "gamma"),
    "steps": ("train", "steps"),
}


def apply_overrides(cfg: ExperimentConfig, overrides: Dict[str, Any]) -> ExperimentConfig:
    """Apply command-line values (None means "not given") on top of the file values."""
    patch: Dict[str, Any] = {}
    for flag, value in overrides.items():
        if value is None:
            continue
        if flag not in OVERRIDES:
            raise ConfigError(f"unknown override {flag!r}")
        path = OVERRIDES[flag]
        node = patch
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = value
    return _merge(cfg, patch, "")
