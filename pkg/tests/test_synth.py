import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occlab.head import Box
from occlab.synth import (
    CropConfig,
    OccluderSpec,
    Scene,
    SceneConfig,
    benchmark_configs,
    box_pixels,
    box_to_crop,
    crop_resize,
    crop_to_frame,
    draw_pair,
    generate_sequence,
    make_sample,
    scene_bank,
    write_pgm,
)


def pixel_overlap_fraction(scene, t):
    """Count target pixels covered by any occluder rectangle."""
    h, w = scene.config.canvas
    x0, y0, x1, y1 = scene.target_rect(t)
    target = np.zeros((h + 64, w + 64), bool)
    occ = np.zeros_like(target)
    off = 32
    target[y0 + off : y1 + off, x0 + off : x1 + off] = True
    for a, b, c, d in scene.occluder_rects(t):
        occ[b + off : d + off, a + off : c + off] = True
    return (target & occ).sum() / target.sum()


def test_zero_occluders_never_occluded():
    frames = generate_sequence(SceneConfig(length=15, seed=4))
    assert all(f.occluded_fraction == 0.0 for f in frames)


def test_same_seed_bit_identical():
    a = generate_sequence(SceneConfig(length=6, seed=9))
    b = generate_sequence(SceneConfig(length=6, seed=9))
    for fa, fb in zip(a, b):
        assert fa.image.tobytes() == fb.image.tobytes()
        assert fa.gt == fb.gt


@pytest.mark.parametrize("shape", ["left", "right", "top", "bottom", "center"])
def test_half_coverage_fraction_matches_pixel_count(shape):
    occ = (OccluderSpec(shape, 0.5, 2, 8),)
    scene = Scene(SceneConfig(length=10, seed=21, occluders=occ))
    for t in range(2, 8):
        frac = scene.occluded_fraction(t)
        assert abs(frac - pixel_overlap_fraction(scene, t)) < 1e-12
        assert abs(frac - 0.5) <= 0.05
    assert scene.occluded_fraction(1) == 0.0 and scene.occluded_fraction(8) == 0.0


@given(st.integers(0, 2**31), st.floats(0, 1), st.sampled_from(["left", "top", "center"]))
@settings(max_examples=25, deadline=None)
def test_occluded_fraction_is_exact_overlap(seed, cov, shape):
    occ = (OccluderSpec(shape, cov, 0, 3), OccluderSpec("right", 0.3, 1, 3))
    scene = Scene(SceneConfig(length=3, seed=seed, occluders=occ))
    for t in range(3):
        assert abs(scene.occluded_fraction(t) - pixel_overlap_fraction(scene, t)) < 1e-12


def test_occluder_schedule_leaves_trajectory_unchanged():
    plain = Scene(SceneConfig(length=20, seed=5))
    occ = Scene(SceneConfig(length=20, seed=5, occluders=(OccluderSpec("left", 0.6, 3, 9),)))
    assert [plain.gt_box(t) for t in range(20)] == [occ.gt_box(t) for t in range(20)]


def test_occluder_pixels_are_drawn():
    occ = (OccluderSpec("center", 0.5, 0, 2),)
    plain = Scene(SceneConfig(length=2, seed=3)).render(0)
    covered = Scene(SceneConfig(length=2, seed=3, occluders=occ)).render(0)
    assert not np.array_equal(plain, covered)


@given(st.integers(0, 2**31))
@settings(max_examples=20, deadline=None)
def test_gt_boxes_valid(seed):
    scene = Scene(SceneConfig(length=40, seed=seed, speed_range=(1.5, 3.0)))
    for t in range(len(scene)):
        scene.gt_box(t).validate()
        x0, y0, x1, y1 = scene.target_rect(t)
        assert x0 >= 1 and y0 >= 1 and x1 <= 127 and y1 <= 127


def test_config_validation():
    with pytest.raises(ValueError):
        Scene(SceneConfig(occluders=(OccluderSpec("left", 1.5, 0, 2),)))
    with pytest.raises(ValueError):
        Scene(SceneConfig(canvas=(20, 20), size_range=(16, 20)))
    with pytest.raises(ValueError):
        Scene(SceneConfig(occluders=(OccluderSpec("diagonal", 0.5, 0, 2),)))


def test_sample_zero_jitter_centres_target():
    frame = generate_sequence(SceneConfig(length=1, seed=2))[0]
    s = make_sample(frame, CropConfig())
    assert s.gt.cx == pytest.approx(0.5) and s.gt.cy == pytest.approx(0.5)
    assert s.z.shape == (3, 32, 32) and s.x.shape == (3, 64, 64)
    assert np.all(np.isfinite(s.z)) and np.all(np.isfinite(s.x))


def test_resize_constant_stays_constant():
    img = np.full((3, 40, 50), 0.37, dtype=np.float32)
    out = crop_resize(img, (10.0, 30.0), 37.3, 16)
    np.testing.assert_allclose(out, 0.37, atol=1e-6)


def test_crop_resize_identity_at_unit_scale():
    img = np.random.default_rng(0).random((3, 16, 16)).astype(np.float32)
    out = crop_resize(img, (8.0, 8.0), 16.0, 16)
    np.testing.assert_allclose(out, img, atol=1e-6)


@given(
    st.floats(10, 110), st.floats(10, 110), st.floats(4, 30), st.floats(4, 30),
    st.floats(-10, 10), st.floats(-10, 10), st.floats(40, 120),
)
def test_crop_coordinate_round_trip(cx, cy, w, h, dx, dy, side):
    center = (cx + dx, cy + dy)
    box = box_to_crop((cx, cy, w, h), center, side)
    back = crop_to_frame(box, center, side)
    np.testing.assert_allclose(back, (cx, cy, w, h), atol=1e-9)


def test_jittered_sample_gt_maps_back_to_frame():
    scene = Scene(SceneConfig(length=5, seed=8))
    rng = np.random.default_rng(0)
    crop = CropConfig(center_jitter=0.5, scale_jitter=0.2)
    frame = scene.frame(0)
    s = make_sample(frame, crop, rng, search_frame=scene.frame(3))
    s.gt.validate()
    assert s.gt.cx != pytest.approx(0.5)


def test_degenerate_gt_rejected():
    frame = generate_sequence(SceneConfig(length=1, seed=2))[0]
    frame.gt = Box(0.5, 0.5, 0.0, 0.1)
    with pytest.raises(ValueError):
        make_sample(frame, CropConfig())


def test_scene_bank_and_pairs_deterministic():
    a = scene_bank(6, seed=1, length=12)
    b = scene_bank(6, seed=1, length=12)
    crop = CropConfig(center_jitter=0.5)
    sa = draw_pair(a, np.random.default_rng(4), crop)
    sb = draw_pair(b, np.random.default_rng(4), crop)
    assert sa.x.tobytes() == sb.x.tobytes() and sa.gt == sb.gt


def test_benchmark_configs_have_one_occlusion_interval():
    cfgs = benchmark_configs(5, seed=3, length=40)
    assert [c.occluders[0].shape for c in cfgs] == ["left", "right", "top", "bottom", "center"]
    for c in cfgs:
        (occ,) = c.occluders
        assert 1 <= occ.start < occ.end <= 40 and 0.4 <= occ.coverage <= 0.7


def test_write_pgm(tmp_path):
    path = tmp_path / "c.pgm"
    write_pgm(path, np.array([[0.0, 1.0], [0.5, 0.2]]))
    assert path.read_text() == "P2\n2 2\n255\n0 255\n128 51\n"


def test_box_pixels():
    assert box_pixels(Box(0.5, 0.25, 0.1, 0.2), (100, 200)) == (100.0, 25.0, 20.0, 20.0)
