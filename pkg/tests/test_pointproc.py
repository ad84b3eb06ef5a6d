import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occlab import pointproc as pp


def simpson_2d(f, x0, x1, y0, y1, n=400):
    """Composite Simpson rule on an n×n grid (n even)."""
    xs = np.linspace(x0, x1, n + 1)
    ys = np.linspace(y0, y1, n + 1)
    w = np.ones(n + 1)
    w[1:-1:2] = 4
    w[2:-1:2] = 2
    vals = f(xs[None, :], ys[:, None])
    hx, hy = (x1 - x0) / n, (y1 - y0) / n
    return float(hx * hy / 9.0 * (w[:, None] * w[None, :] * vals).sum())


def bell(rho):
    return lambda x, y: np.exp(-((x / rho) ** 2 + (y / rho) ** 2))


GRID8 = pp.GridSpec(32, 32, 4)


# ----------------------------------------------------------------------------
# sample_gamma


def test_poisson_zero_mean():
    rng = np.random.default_rng(0)
    assert all(pp.sample_gamma(0.0, rng) == 0 for _ in range(100))


def test_poisson_negative_mean_rejected():
    with pytest.raises(ValueError):
        pp.sample_gamma(-1.0, np.random.default_rng(0))


@pytest.mark.parametrize("lam", [45.0, 7.5])
def test_poisson_moments(lam):
    rng = np.random.default_rng(11)
    n = 100_000 if lam > 30 else 20_000
    draws = np.array([pp.sample_gamma(lam, rng) for _ in range(n)])
    assert abs(draws.mean() - lam) < 3 * math.sqrt(lam / n)
    assert abs(draws.var() - lam) < 0.1 * lam


# ----------------------------------------------------------------------------
# intensity


def test_normalization_constant_unit_square():
    spec = pp.IntensitySpec(1)
    dom = pp.Domain(-1, 1, -1, 1)
    value = pp.normalization_constant(spec, dom)
    oracle = simpson_2d(bell(1.0), -1, 1, -1, 1)
    assert value == pytest.approx(2.230985141404134, abs=1e-12)
    assert abs(value - oracle) < 1e-9
    assert abs(value - (math.sqrt(math.pi) * math.erf(1.0)) ** 2) < 1e-12


def test_normalization_constant_degenerate_domain():
    assert pp.normalization_constant(pp.IntensitySpec(1), pp.Domain(0.3, 0.3, 0.2, 0.2)) == 0.0


@given(st.floats(0.1, 5.0))
def test_normalization_constant_scales_with_bandwidth(rho):
    base = pp.normalization_constant(pp.IntensitySpec(1), pp.Domain(-1, 1, -1, 1))
    scaled = pp.normalization_constant(pp.IntensitySpec(1, bandwidth=rho), pp.Domain(-rho, rho, -rho, rho))
    assert scaled == pytest.approx(base * rho * rho, rel=1e-12)


def test_normalization_constant_off_centre_against_simpson():
    spec = pp.IntensitySpec(1, bandwidth=0.7)
    dom = pp.Domain(-0.3, 1.4, -1.1, 0.2)
    oracle = simpson_2d(bell(0.7), dom.x0, dom.x1, dom.y0, dom.y1)
    assert abs(pp.normalization_constant(spec, dom) - oracle) < 1e-9


def test_intensity_integrates_to_gamma():
    spec = pp.IntensitySpec(45)
    dom = pp.Domain(-1, 1, -1, 1)
    total = simpson_2d(lambda x, y: pp.intensity_at(x, y, spec, dom), -1, 1, -1, 1)
    assert abs(total - 45) < 1e-9 * 45
    assert abs(pp.expected_counts(spec, GRID8).sum() - 45) < 1e-9


def test_intensity_zero_gamma_and_peak():
    dom = pp.Domain(-1, 1, -1, 1)
    assert pp.intensity_at(0.3, -0.2, pp.IntensitySpec(0), dom) == 0.0
    spec = pp.IntensitySpec(10)
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1, 1, size=(500, 2))
    centre = pp.intensity_at(0.0, 0.0, spec, dom)
    assert np.all(pp.intensity_at(pts[:, 0], pts[:, 1], spec, dom) <= centre)
    assert pp.peak_intensity(spec, dom) == centre


@given(st.floats(-1, 1), st.floats(-1, 1))
def test_intensity_symmetry(u, v):
    spec = pp.IntensitySpec(7)
    dom = pp.Domain(-1, 1, -1, 1)
    a = pp.intensity_at(u, v, spec, dom)
    assert a == pp.intensity_at(-u, v, spec, dom) == pp.intensity_at(u, -v, spec, dom)


def test_expected_counts_against_simpson_per_cell():
    spec = pp.IntensitySpec(45)
    counts = pp.expected_counts(spec, pp.GridSpec(8, 8, 2))
    dom = pp.Domain(-1, 1, -1, 1)
    edges = np.linspace(-1, 1, 5)
    for i in range(4):
        for j in range(4):
            oracle = simpson_2d(
                lambda x, y: pp.intensity_at(x, y, spec, dom), edges[j], edges[j + 1], edges[i], edges[i + 1], n=200
            )
            assert abs(counts[i, j] - oracle) < 1e-9


# ----------------------------------------------------------------------------
# simulation


def test_homogeneous_basics():
    rng = np.random.default_rng(1)
    dom = pp.Domain(-1, 2, 0, 0.5)
    assert len(pp.simulate_homogeneous(0.0, dom, rng)) == 0
    pat = pp.simulate_homogeneous(200.0, dom, rng)
    assert np.all(dom.contains(pat.points))


def test_homogeneous_mean_count():
    rng = np.random.default_rng(2)
    dom = pp.Domain(0, 2, 0, 1.5)
    rate, n = 4.0, 20_000
    counts = np.array([len(pp.simulate_homogeneous(rate, dom, rng)) for _ in range(n)])
    mean = rate * dom.area
    assert abs(counts.mean() - mean) < 3 * math.sqrt(mean / n)


def test_thin_degenerate_cases():
    rng = np.random.default_rng(3)
    dom = pp.Domain(-1, 1, -1, 1)
    cands = pp.simulate_homogeneous(50.0, dom, rng)
    assert len(pp.thin(cands, pp.IntensitySpec(0), dom, 1.0, rng)) == 0
    # a flat bell (huge bandwidth) sits at lambda_max everywhere up to rounding
    spec = pp.IntensitySpec(10, bandwidth=1e9)
    lam = pp.peak_intensity(spec, dom)
    assert len(pp.thin(cands, spec, dom, lam, rng)) == len(cands)


def test_thin_rejects_low_lambda_max():
    rng = np.random.default_rng(4)
    dom = pp.Domain(-1, 1, -1, 1)
    cands = pp.PointPattern(np.array([[0.0, 0.0]]))
    with pytest.raises(ValueError):
        pp.thin(cands, pp.IntensitySpec(10), dom, 0.5 * pp.peak_intensity(pp.IntensitySpec(10), dom), rng)


def test_thin_acceptance_fraction():
    rng = np.random.default_rng(5)
    dom = pp.Domain(-1, 1, -1, 1)
    spec = pp.IntensitySpec(20)
    lam_max = pp.peak_intensity(spec, dom)
    kept = total = 0
    for _ in range(20_000):
        cands = pp.simulate_homogeneous(lam_max, dom, rng)
        total += len(cands)
        kept += len(pp.thin(cands, spec, dom, lam_max, rng))
    p = spec.gamma / (lam_max * dom.area)
    assert abs(kept / total - p) < 3 * math.sqrt(p * (1 - p) / total)


def test_cox_zero_mean_is_empty():
    rng = np.random.default_rng(6)
    assert len(pp.simulate_cox(0, pp.Domain(-1, 1, -1, 1), rng)) == 0


def test_cox_mean_count():
    rng = np.random.default_rng(7)
    dom = pp.Domain(-1, 1, -1, 1)
    counts = np.array([len(pp.simulate_cox(45, dom, rng)) for _ in range(20_000)])
    se = counts.std() / math.sqrt(len(counts))
    assert abs(counts.mean() - 45) < 3 * se


def rejection_oracle_hit_prob(spec, grid, sub=64):
    """Cell occupancy probabilities from a discrete rejection sampler.

    Each cell is split into sub×sub micro-cells; a micro-cell midpoint is
    accepted with probability intensity/peak.  The acceptance rate per cell
    times peak×cell-area estimates the cell mass, and a Poisson count with
    that mass hits the cell with probability 1 − exp(−mass).
    """
    dom = grid.domain(spec.coordinate_mode)
    lam_max = pp.peak_intensity(spec, dom)
    cw = (dom.x1 - dom.x0) / grid.cols
    ch = (dom.y1 - dom.y0) / grid.rows
    probs = np.zeros((grid.rows, grid.cols))
    for i in range(grid.rows):
        for j in range(grid.cols):
            xs = dom.x0 + (j + (np.arange(sub) + 0.5) / sub) * cw
            ys = dom.y0 + (i + (np.arange(sub) + 0.5) / sub) * ch
            accept = pp.intensity_at(xs[None, :], ys[:, None], spec, dom) / lam_max
            mass = accept.mean() * lam_max * cw * ch
            probs[i, j] = 1 - math.exp(-mass)
    return probs


def test_thinning_cell_occupancy_matches_rejection_oracle():
    grid = pp.GridSpec(16, 16, 4)
    spec = pp.IntensitySpec(12)
    dom = grid.domain()
    rng = np.random.default_rng(8)
    n = 50_000
    hits = np.zeros((4, 4))
    for _ in range(n):
        hits += pp.pattern_to_mask(pp.simulate_inhomogeneous(spec, dom, rng), grid).keep
    freq = hits / n
    oracle = rejection_oracle_hit_prob(spec, grid)
    se = np.sqrt(oracle * (1 - oracle) / n)
    assert np.all(np.abs(freq - oracle) < 3 * se + 1e-4), np.max(np.abs(freq - oracle) / se)


def test_centre_cells_hit_more_often_than_corners():
    grid = pp.GridSpec(16, 16, 4)
    rng = np.random.default_rng(9)
    hits = np.zeros((4, 4))
    for _ in range(50_000):
        hits += pp.cox_mask(grid, 0.3, rng).keep
    centre = hits[1:3, 1:3].min()
    corners = max(hits[0, 0], hits[0, -1], hits[-1, 0], hits[-1, -1])
    assert centre > corners


def test_raw_mode_concentrates_points():
    grid = pp.GridSpec(64, 64, 8)
    dom = grid.domain(pp.RAW)
    assert (dom.x0, dom.x1) == (-4.0, 4.0)
    rng = np.random.default_rng(10)
    pts = np.vstack([pp.simulate_cox(45, dom, rng, pp.RAW).points for _ in range(200)])
    assert np.mean(np.hypot(pts[:, 0], pts[:, 1]) < 3) > 0.99


# ----------------------------------------------------------------------------
# masks


def test_pattern_to_mask_cases():
    grid = pp.GridSpec(16, 16, 4)
    empty = pp.pattern_to_mask(pp.PointPattern(), grid)
    assert empty.kept == 0
    # centre of cell (row 1, col 2) in normalized coords
    pt = np.array([[-1 + 2.5 * 0.5, -1 + 1.5 * 0.5]])
    one = pp.pattern_to_mask(pp.PointPattern(pt), grid)
    assert one.kept == 1 and one.keep[1, 2]
    five = pp.pattern_to_mask(pp.PointPattern(np.repeat(pt, 5, axis=0)), grid)
    np.testing.assert_array_equal(one.keep, five.keep)
    flipped = pp.pattern_to_mask(pp.PointPattern(pt), grid, pp.POINTS_MASK)
    assert flipped.kept == 15 and not flipped.keep[1, 2]


def test_pattern_to_mask_cell_edges():
    grid = pp.GridSpec(8, 8, 4)  # 2×2 cells over [-1, 1]^2
    pts = np.array([[0.0, 0.0], [1.0, 1.0], [-1.0, -1.0]])
    rows, cols = pp.pattern_to_cells(pp.PointPattern(pts), grid, grid.domain())
    # lower edges are inclusive; the domain's max edge snaps to the last cell
    assert rows.tolist() == [1, 1, 0] and cols.tolist() == [1, 1, 0]


def test_cox_varsigma_values():
    assert pp.cox_varsigma(0.3, GRID8) == 45
    assert pp.cox_varsigma(0.3, GRID8, pp.POINTS_MASK) == 19
    with pytest.raises(ValueError):
        pp.cox_varsigma(1.5, GRID8)


def test_uniform_topk_extremes():
    rng = np.random.default_rng(0)
    assert pp.uniform_topk(GRID8, 0.0, rng).kept == 64
    assert pp.uniform_topk(GRID8, 1.0, rng).kept == 0


@given(st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_uniform_topk_keeps_exactly_k(sigma, seed):
    m = pp.uniform_topk(GRID8, sigma, np.random.default_rng(seed))
    assert m.kept == pp.topk_count(GRID8, sigma)
    assert set(np.unique(m.bits)) <= {0, 1}


def test_uniform_topk_marginals():
    rng = np.random.default_rng(12)
    n = 10_000
    freq = sum(pp.uniform_topk(GRID8, 0.3, rng).keep.astype(float) for _ in range(n)) / n
    p = 45 / 64
    assert np.all(np.abs(freq - p) < 3 * math.sqrt(p * (1 - p) / n) + 1e-3)


def test_uniform_topk_ties_prefer_lower_index():
    class ConstRng:
        def random(self, n):
            return np.full(n, 0.5)

    m = pp.uniform_topk(pp.GridSpec(8, 8, 4), 0.5, ConstRng())
    assert m.keep.tolist() == [[True, True], [False, False]]


def test_apply_mask_cases():
    grid = pp.GridSpec(4, 4, 2)
    rng = np.random.default_rng(0)
    img = rng.random((3, 4, 4)).astype(np.float32)
    all_keep = pp.MaskMatrix(np.ones((2, 2), bool))
    np.testing.assert_array_equal(pp.apply_mask(img, all_keep, grid), img)
    np.testing.assert_array_equal(pp.apply_mask(img, pp.MaskMatrix(np.zeros((2, 2), bool)), grid), 0.0)
    one = pp.MaskMatrix(np.array([[True, False], [True, True]]))
    out = pp.apply_mask(img, one, grid)
    assert np.count_nonzero(out == 0) == 3 * 4
    np.testing.assert_array_equal(out[:, :2, 2:], 0.0)
    rest = np.ones((4, 4), bool)
    rest[:2, 2:] = False
    assert out[:, rest].tobytes() == img[:, rest].tobytes()


def test_apply_mask_dim_mismatch():
    with pytest.raises(ValueError):
        pp.apply_mask(np.zeros((3, 8, 8)), pp.MaskMatrix(np.ones((2, 2), bool)), pp.GridSpec(4, 4, 2))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30)
def test_apply_mask_idempotent(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((3, 32, 32))
    m = pp.cox_mask(GRID8, 0.3, rng)
    once = pp.apply_mask(img, m, GRID8)
    np.testing.assert_array_equal(pp.apply_mask(once, m, GRID8), once)


def test_text_dumps():
    m = pp.MaskMatrix(np.array([[True, False, True]]))
    assert pp.mask_to_pgm(m) == "P2\n3 1\n1\n1 0 1\n"
    csv = pp.pattern_to_csv(pp.PointPattern(np.array([[0.5, -0.25]])))
    assert csv == "x,y\n0.5,-0.25\n"
