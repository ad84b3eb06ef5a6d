"""Finite spatial Cox process masking and the uniform TopK baseline.

The Cox process is simulated hierarchically: a Poisson-distributed total
mass ``Gamma`` fixes a bell-shaped intensity over the template rectangle,
and the resulting inhomogeneous Poisson process is drawn by thinning a
homogeneous one at the peak rate.  Cells of the template grid hit by at
least one point form the mask matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

POINTS_KEEP = "points-keep"
POINTS_MASK = "points-mask"
NORMALIZED = "normalized"
RAW = "raw"


@dataclass(frozen=True)
class GridSpec:
    template_h: int
    template_w: int
    block: int

    def __post_init__(self):
        if self.block <= 0 or self.template_h % self.block or self.template_w % self.block:
            raise ValueError(f"block {self.block} must divide template {self.template_h}x{self.template_w}")
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid must have at least one cell")

    @property
    def rows(self) -> int:
        return self.template_h // self.block

    @property
    def cols(self) -> int:
        return self.template_w // self.block

    @property
    def cells(self) -> int:
        return self.rows * self.cols

    def domain(self, mode: str = NORMALIZED) -> "Domain":
        """Continuous rectangle the process lives on.

        normalized: [-1, 1]^2 regardless of aspect.  raw: one unit per cell,
        centred on the origin.
        """
        if mode == NORMALIZED:
            return Domain(-1.0, 1.0, -1.0, 1.0)
        if mode == RAW:
            return Domain(-self.cols / 2, self.cols / 2, -self.rows / 2, self.rows / 2)
        raise ValueError(f"unknown coordinate mode {mode!r}")


@dataclass(frozen=True)
class Domain:
    x0: float
    x1: float
    y0: float
    y1: float

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def contains(self, pts: np.ndarray) -> np.ndarray:
        return (pts[:, 0] >= self.x0) & (pts[:, 0] <= self.x1) & (pts[:, 1] >= self.y0) & (pts[:, 1] <= self.y1)


@dataclass(frozen=True)
class IntensitySpec:
    gamma: int
    coordinate_mode: str = NORMALIZED
    bandwidth: float = 1.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.coordinate_mode not in (NORMALIZED, RAW):
            raise ValueError(f"unknown coordinate mode {self.coordinate_mode!r}")


@dataclass
class PointPattern:
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class MaskMatrix:
    """Binary keep-grid; ``keep[i, j]`` is True when cell (i, j) survives."""

    keep: np.ndarray
    polarity: str = POINTS_KEEP
    source: str = "cox"

    @property
    def bits(self) -> np.ndarray:
        return self.keep.astype(np.uint8)

    @property
    def kept(self) -> int:
        return int(self.keep.sum())

    @property
    def masked_fraction(self) -> float:
        return 1.0 - self.keep.mean()


# ----------------------------------------------------------------------------
# Poisson variates


def _log_factorial(k: int) -> float:
    return math.lgamma(k + 1.0)


def _poisson_inversion(lam: float, rng: np.random.Generator) -> int:
    u = rng.random()
    k = 0
    p = math.exp(-lam)
    cdf = p
    while u > cdf:
        k += 1
        p *= lam / k
        cdf += p
        if p == 0.0 and cdf < u:
            # cdf stalled from roundoff in the far tail
            break
    return k


def _poisson_ptrs(lam: float, rng: np.random.Generator) -> int:
    # Hormann (1993) transformed rejection with squeeze.
    slam = math.sqrt(lam)
    loglam = math.log(lam)
    b = 0.931 + 2.53 * slam
    a = -0.059 + 0.02483 * b
    inv_alpha = 1.1239 + 1.1328 / (b - 3.4)
    vr = 0.9277 - 3.6224 / (b - 2)
    while True:
        u = rng.random() - 0.5
        v = rng.random()
        us = 0.5 - abs(u)
        k = math.floor((2 * a / us + b) * u + lam + 0.43)
        if us >= 0.07 and v <= vr:
            return int(k)
        if k < 0 or (us < 0.013 and v > us):
            continue
        if v == 0.0:
            return int(k)
        if (math.log(v) + math.log(inv_alpha) - math.log(a / (us * us) + b)) <= (
            -lam + k * loglam - _log_factorial(int(k))
        ):
            return int(k)


def sample_gamma(varsigma: float, rng: np.random.Generator) -> int:
    """One Poisson(varsigma) draw."""
    if varsigma < 0 or not math.isfinite(varsigma):
        raise ValueError(f"Poisson mean must be a finite nonnegative number, got {varsigma}")
    if varsigma == 0:
        return 0
    if varsigma <= 30:
        return _poisson_inversion(varsigma, rng)
    return _poisson_ptrs(varsigma, rng)


# ----------------------------------------------------------------------------
# intensity


def _gauss_integral_1d(lo: float, hi: float, rho: float) -> float:
    # int_lo^hi exp(-(t/rho)^2) dt
    return 0.5 * math.sqrt(math.pi) * rho * (math.erf(hi / rho) - math.erf(lo / rho))


def normalization_constant(spec: IntensitySpec, domain: Domain) -> float:
    """Integral of the unnormalized bell over ``domain``."""
    if domain.x1 <= domain.x0 or domain.y1 <= domain.y0:
        return 0.0
    rho = spec.bandwidth
    return _gauss_integral_1d(domain.x0, domain.x1, rho) * _gauss_integral_1d(domain.y0, domain.y1, rho)


def intensity_at(x, y, spec: IntensitySpec, domain: Domain):
    norm = normalization_constant(spec, domain)
    if norm <= 0:
        raise ValueError("domain has zero area")
    rho = spec.bandwidth
    return spec.gamma * np.exp(-((np.asarray(x) / rho) ** 2 + (np.asarray(y) / rho) ** 2)) / norm


def peak_intensity(spec: IntensitySpec, domain: Domain) -> float:
    """Supremum of the intensity over the domain (at the point nearest the origin)."""
    cx = min(max(0.0, domain.x0), domain.x1)
    cy = min(max(0.0, domain.y0), domain.y1)
    return float(intensity_at(cx, cy, spec, domain))


def expected_counts(spec: IntensitySpec, grid: GridSpec) -> np.ndarray:
    """Expected number of points per grid cell (rows x cols), exact via erf."""
    dom = grid.domain(spec.coordinate_mode)
    norm = normalization_constant(spec, dom)
    xs = np.linspace(dom.x0, dom.x1, grid.cols + 1)
    ys = np.linspace(dom.y0, dom.y1, grid.rows + 1)
    rho = spec.bandwidth
    ix = np.array([_gauss_integral_1d(xs[j], xs[j + 1], rho) for j in range(grid.cols)])
    iy = np.array([_gauss_integral_1d(ys[i], ys[i + 1], rho) for i in range(grid.rows)])
    return spec.gamma * np.outer(iy, ix) / norm


# ----------------------------------------------------------------------------
# simulation


def simulate_homogeneous(rate: float, domain: Domain, rng: np.random.Generator) -> PointPattern:
    if rate < 0:
        raise ValueError("rate must be nonnegative")
    n = sample_gamma(rate * domain.area, rng)
    xs = rng.uniform(domain.x0, domain.x1, size=n)
    ys = rng.uniform(domain.y0, domain.y1, size=n)
    return PointPattern(np.column_stack([xs, ys]))


def thin(
    candidates: PointPattern, spec: IntensitySpec, domain: Domain, lambda_max: float, rng: np.random.Generator
) -> PointPattern:
    """Keep each candidate independently with probability intensity/lambda_max."""
    pts = candidates.points
    if len(pts) == 0:
        return PointPattern(pts.copy())
    lam = intensity_at(pts[:, 0], pts[:, 1], spec, domain)
    if np.any(lam > lambda_max * (1 + 1e-12)):
        raise ValueError("lambda_max is below the intensity at a candidate point")
    u = rng.random(len(pts))
    keep = u * lambda_max < lam
    return PointPattern(pts[keep])


def simulate_inhomogeneous(spec: IntensitySpec, domain: Domain, rng: np.random.Generator) -> PointPattern:
    """Poisson process with the bell intensity for a fixed total mass ``spec.gamma``."""
    if spec.gamma == 0:
        return PointPattern()
    lam_max = peak_intensity(spec, domain)
    return thin(simulate_homogeneous(lam_max, domain, rng), spec, domain, lam_max, rng)


def simulate_cox(
    varsigma: float,
    domain: Domain,
    rng: np.random.Generator,
    coordinate_mode: str = NORMALIZED,
    bandwidth: float = 1.0,
) -> PointPattern:
    """Two-stage draw: Gamma ~ Poisson(varsigma), then the thinned process."""
    gamma = sample_gamma(varsigma, rng)
    spec = IntensitySpec(gamma=gamma, coordinate_mode=coordinate_mode, bandwidth=bandwidth)
    return simulate_inhomogeneous(spec, domain, rng)


def pattern_to_cells(pattern: PointPattern, grid: GridSpec, domain: Domain) -> Tuple[np.ndarray, np.ndarray]:
    """Row and column of the half-open cell each point falls in."""
    pts = pattern.points
    if len(pts) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    fx = (pts[:, 0] - domain.x0) / (domain.x1 - domain.x0) * grid.cols
    fy = (pts[:, 1] - domain.y0) / (domain.y1 - domain.y0) * grid.rows
    cols = np.clip(np.floor(fx).astype(int), 0, grid.cols - 1)
    rows = np.clip(np.floor(fy).astype(int), 0, grid.rows - 1)
    return rows, cols


def pattern_to_mask(
    pattern: PointPattern, grid: GridSpec, polarity: str = POINTS_KEEP, coordinate_mode: str = NORMALIZED
) -> MaskMatrix:
    """Occupancy grid of ``pattern``; polarity decides whether hit cells are kept or masked."""
    dom = grid.domain(coordinate_mode)
    hit = np.zeros((grid.rows, grid.cols), dtype=bool)
    rows, cols = pattern_to_cells(pattern, grid, dom)
    hit[rows, cols] = True
    if polarity == POINTS_KEEP:
        keep = hit
    elif polarity == POINTS_MASK:
        keep = ~hit
    else:
        raise ValueError(f"unknown polarity {polarity!r}")
    return MaskMatrix(keep=keep, polarity=polarity, source="cox")


def cox_varsigma(sigma: float, grid: GridSpec, polarity: str = POINTS_KEEP) -> int:
    """Expected point count matching masking ratio ``sigma`` for the given polarity."""
    if not 0.0 <= sigma <= 1.0:
        raise ValueError(f"masking ratio must lie in [0, 1], got {sigma}")
    frac = (1.0 - sigma) if polarity == POINTS_KEEP else sigma
    return int(np.floor(frac * grid.cells + 0.5))


def cox_mask(
    grid: GridSpec,
    sigma: float,
    rng: np.random.Generator,
    polarity: str = POINTS_KEEP,
    coordinate_mode: str = NORMALIZED,
    bandwidth: float = 1.0,
) -> MaskMatrix:
    """Cox-process mask for masking ratio ``sigma``."""
    varsigma = cox_varsigma(sigma, grid, polarity)
    dom = grid.domain(coordinate_mode)
    pattern = simulate_cox(varsigma, dom, rng, coordinate_mode, bandwidth)
    return pattern_to_mask(pattern, grid, polarity, coordinate_mode)


def topk_count(grid: GridSpec, sigma: float) -> int:
    if not 0.0 <= sigma <= 1.0:
        raise ValueError(f"masking ratio must lie in [0, 1], got {sigma}")
    return int(np.floor((1.0 - sigma) * grid.cells + 0.5))


def uniform_topk(grid: GridSpec, sigma: float, rng: np.random.Generator) -> MaskMatrix:
    """Keep the K cells carrying the largest i.i.d. uniform scores."""
    k = topk_count(grid, sigma)
    scores = rng.random(grid.cells)
    # stable sort on -score: equal scores resolve to the lower row-major index
    order = np.argsort(-scores, kind="stable")
    keep = np.zeros(grid.cells, dtype=bool)
    keep[order[:k]] = True
    return MaskMatrix(keep=keep.reshape(grid.rows, grid.cols), polarity=POINTS_KEEP, source="uniform")


def apply_mask(image: np.ndarray, mask: MaskMatrix, grid: GridSpec) -> np.ndarray:
    """Zero every b x b block whose cell is masked; works on C×H×W or N×C×H×W."""
    image = np.asarray(image)
    if image.shape[-2:] != (grid.template_h, grid.template_w):
        raise ValueError(f"image spatial dims {image.shape[-2:]} do not match grid")
    if mask.keep.shape != (grid.rows, grid.cols):
        raise ValueError("mask shape does not match grid")
    b = grid.block
    pix = np.kron(mask.keep.astype(image.dtype), np.ones((b, b), dtype=image.dtype))
    return image * pix


# ----------------------------------------------------------------------------
# plain-text dumps


def mask_to_pgm(mask: MaskMatrix) -> str:
    bits = mask.bits
    rows = [" ".join(str(int(v)) for v in row) for row in bits]
    return f"P2\n{bits.shape[1]} {bits.shape[0]}\n1\n" + "\n".join(rows) + "\n"


def pattern_to_csv(pattern: PointPattern) -> str:
    lines = ["x,y"] + [f"{x!r},{y!r}" for x, y in pattern.points.tolist()]
    return "\n".join(lines) + "\n"
