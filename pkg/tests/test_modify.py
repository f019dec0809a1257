"""Tests for modification plans and the three pixel modifiers."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from confbench import core, modify, synthgen


def _rng(seed=0, tag="t"):
    return core.derive_stream(seed, tag).generator()


def _tissue_tile(seed=0):
    return synthgen.generate_tile([30.0, 45.0, 25.0], synthgen.GenConfig(), _rng(seed, "tile"))


@pytest.fixture(scope="module")
def dataset():
    cfg = synthgen.GenConfig(num_wsis=12, tiles_per_wsi_range=(20, 40), seed=5)
    return synthgen.generate_dataset(cfg)


# ---------------------------------------------------------------------------
# Plan sampling
# ---------------------------------------------------------------------------


def test_plan_p0_flags_nothing(dataset):
    plan = modify.sample_plan(dataset, modify.Modifier.BLUR, modify.Design.TILE_BASED, 0.0, seed=1)
    assert plan.num_flagged_tiles() == 0
    # tile-based: every positive WSI still carries the WSI flag
    for w in dataset:
        assert plan.wsi_flags[w.wsi_id] == (w.label == 1)


def test_plan_p1_tile_based_flags_every_positive_tile(dataset):
    plan = modify.sample_plan(dataset, modify.Modifier.BLUR, modify.Design.TILE_BASED, 1.0, seed=1)
    for w in dataset:
        flags = plan.tile_flags[w.wsi_id]
        if w.label == 1:
            assert flags.all()
        else:
            assert not flags.any()


def test_plan_tile_rate_matches_probability(dataset):
    p = 0.3
    plan = modify.sample_plan(dataset, modify.Modifier.BLUR, modify.Design.TILE_BASED, p, seed=9)
    total = sum(w.num_tiles for w in dataset if w.label == 1)
    flagged = plan.num_flagged_tiles()
    sd = np.sqrt(p * (1 - p) * total)
    assert abs(flagged - p * total) <= 3 * sd


def test_plan_wsi_based_rates():
    cfg = synthgen.GenConfig(num_wsis=60, tiles_per_wsi_range=(30, 50), seed=8)
    wsis = synthgen.generate_dataset(cfg)
    p = 0.5
    plan = modify.sample_plan(wsis, modify.Modifier.BLUR, modify.Design.WSI_BASED, p, seed=4)
    positives = [w for w in wsis if w.label == 1]
    n_flagged = sum(plan.wsi_flags[w.wsi_id] for w in positives)
    assert abs(n_flagged - p * len(positives)) <= 3 * np.sqrt(p * (1 - p) * len(positives))
    # inside flagged WSIs, tiles are flagged at 0.5
    tiles = sum(w.num_tiles for w in positives if plan.wsi_flags[w.wsi_id])
    flagged_tiles = plan.num_flagged_tiles()
    assert abs(flagged_tiles - 0.5 * tiles) <= 3 * np.sqrt(0.25 * tiles)
    # unflagged WSIs carry no tile flags
    for w in positives:
        if not plan.wsi_flags[w.wsi_id]:
            assert not plan.tile_flags[w.wsi_id].any()


def test_plan_never_flags_negatives(dataset):
    for design in modify.Design:
        for p in (0.0, 0.4, 1.0):
            plan = modify.sample_plan(dataset, modify.Modifier.PEN_MARK, design, p, seed=2)
            for w in dataset:
                if w.label == 0:
                    assert not plan.wsi_flags[w.wsi_id]
                    assert not plan.tile_flags[w.wsi_id].any()


@given(st.floats(min_value=0.0, max_value=1.0), st.integers(0, 2**32), st.sampled_from(list(modify.Design)))
@settings(max_examples=30, deadline=None)
def test_plan_label_safety_property(p, seed, design):
    wsis = _LABEL_SAFETY_DATASET
    plan = modify.sample_plan(wsis, modify.Modifier.BLUR, design, p, seed)
    for w in wsis:
        if w.label == 0:
            assert not plan.wsi_flags[w.wsi_id] and not plan.tile_flags[w.wsi_id].any()


_LABEL_SAFETY_DATASET = synthgen.generate_dataset(
    synthgen.GenConfig(num_wsis=6, tiles_per_wsi_range=(4, 8), seed=77)
)


def test_plan_determinism_and_equality(dataset):
    a = modify.sample_plan(dataset, modify.Modifier.BLUR, modify.Design.TILE_BASED, 0.4, seed=3)
    b = modify.sample_plan(dataset, modify.Modifier.BLUR, modify.Design.TILE_BASED, 0.4, seed=3)
    c = modify.sample_plan(dataset, modify.Modifier.BLUR, modify.Design.TILE_BASED, 0.4, seed=4)
    assert a == b
    assert a != c


def test_plan_rejects_invalid_p(dataset):
    with pytest.raises(ValueError):
        modify.sample_plan(dataset, modify.Modifier.BLUR, modify.Design.TILE_BASED, 1.2, seed=0)


def test_plan_json_round_trip(dataset, tmp_path):
    plan = modify.sample_plan(dataset, modify.Modifier.CLEVER_HANS, modify.Design.WSI_BASED, 0.6, seed=11)
    path = tmp_path / "plan.json"
    modify.save_plan(plan, path)
    assert modify.load_plan(path) == plan


@given(st.lists(st.booleans(), min_size=0, max_size=40))
@settings(max_examples=60, deadline=None)
def test_rle_round_trip(bits):
    flags = np.array(bits, dtype=bool)
    runs = modify._rle_encode(flags)
    assert np.array_equal(modify._rle_decode(runs, flags.size), flags)


# ---------------------------------------------------------------------------
# apply_plan
# ---------------------------------------------------------------------------


def test_apply_plan_p0_is_identity(dataset):
    plan = modify.sample_plan(dataset, modify.Modifier.BLUR, modify.Design.TILE_BASED, 0.0, seed=1)
    out = modify.apply_plan(dataset, plan)
    assert all(a == b for a, b in zip(dataset, out))


def test_apply_plan_touches_only_flagged_tiles(dataset):
    plan = modify.sample_plan(dataset, modify.Modifier.PEN_MARK, modify.Design.TILE_BASED, 0.5, seed=6)
    out = modify.apply_plan(dataset, plan)
    for orig, new in zip(dataset, out):
        flags = plan.tile_flags[orig.wsi_id]
        assert new.modified == bool(plan.wsi_flags[orig.wsi_id] and flags.any())
        for j, ((oi, om), (ni, nm)) in enumerate(zip(orig.tiles, new.tiles)):
            if flags[j]:
                assert nm.modified
                assert not np.array_equal(ni.pixels, oi.pixels)
            else:
                assert not nm.modified
                assert np.array_equal(ni.pixels, oi.pixels)
            assert nm.nucleus_areas == om.nucleus_areas
            assert nm.grid_pos == om.grid_pos


def test_apply_plan_twice_is_identical(dataset):
    plan = modify.sample_plan(dataset, modify.Modifier.CLEVER_HANS, modify.Design.TILE_BASED, 0.5, seed=6)
    first = modify.apply_plan(dataset, plan)
    second = modify.apply_plan(dataset, plan)
    assert all(a == b for a, b in zip(first, second))


def test_apply_plan_without_modifier_raises(dataset):
    plan = modify.sample_plan(dataset, modify.Modifier.NONE, modify.Design.TILE_BASED, 0.5, seed=6)
    with pytest.raises(modify.UnknownModifier):
        modify.apply_plan(dataset, plan)
    # but a p=0 plan with no modifier is a valid no-op
    noop = modify.sample_plan(dataset, modify.Modifier.NONE, modify.Design.TILE_BASED, 0.0, seed=6)
    assert all(a == b for a, b in zip(dataset, modify.apply_plan(dataset, noop)))


# ---------------------------------------------------------------------------
# Text overlay
# ---------------------------------------------------------------------------


def test_clever_hans_alpha0_is_noop():
    tile = _tissue_tile()
    out = modify.apply_clever_hans(tile, _rng(1, "ch"), alpha=0.0)
    assert out == tile


def test_clever_hans_stamp_matches_direct_oracle():
    tile = _tissue_tile()
    n = tile.n
    mask = modify.glyph_mask(n)
    h, w = mask.shape
    out = modify.apply_clever_hans(tile, _rng(2, "ch"), alpha=1.0, rotation_deg=0.0, position=(3, 4))
    expected = tile.pixels.copy()
    expected[3 : 3 + h, 4 : 4 + w][mask] = modify.GLYPH_COLOR
    assert np.array_equal(out.pixels, expected)


def test_clever_hans_changes_only_inside_box():
    tile = _tissue_tile()
    mask = modify.glyph_mask(tile.n)
    h, w = mask.shape
    out = modify.apply_clever_hans(tile, _rng(3, "ch"), rotation_deg=0.0, position=(5, 2))
    delta = (out.pixels != tile.pixels).any(axis=2)
    outside = np.ones_like(delta)
    outside[5 : 5 + h, 2 : 2 + w] = False
    assert not delta[outside].any()
    assert delta.sum() > 0


def test_clever_hans_rotated_box_always_fits():
    for n in (8, 32, 64):
        mask = modify.glyph_mask(n)
        for deg in np.linspace(0, 360, 37):
            rot = modify._rotate_mask(mask, float(deg))
            assert rot.shape[0] <= n and rot.shape[1] <= n


def test_clever_hans_deterministic():
    tile = _tissue_tile()
    a = modify.apply_clever_hans(tile, _rng(4, "ch"))
    b = modify.apply_clever_hans(tile, _rng(4, "ch"))
    assert a == b


# ---------------------------------------------------------------------------
# Blur
# ---------------------------------------------------------------------------


def _dense_blur_oracle(pixels, sigma):
    """Direct 2-D convolution with the full outer-product kernel."""
    radius = int(np.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k1 = np.exp(-(xs**2) / (2.0 * sigma * sigma))
    k1 /= k1.sum()
    k2 = np.outer(k1, k1)
    img = pixels.astype(np.float64)
    padded = np.pad(img, ((radius, radius), (radius, radius), (0, 0)), mode="reflect")
    n = pixels.shape[0]
    out = np.zeros_like(img)
    for dr in range(2 * radius + 1):
        for dc in range(2 * radius + 1):
            out += k2[dr, dc] * padded[dr : dr + n, dc : dc + n, :]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def test_blur_constant_tile_unchanged():
    tile = core.TileImage(np.full((16, 16, 3), 77, dtype=np.uint8))
    assert modify.apply_blur(tile, 4.0) == tile


@pytest.mark.parametrize("sigma", [0.5, 1.3, 4.0])
def test_blur_matches_dense_oracle(sigma):
    tile = _tissue_tile(seed=9)
    ours = modify.apply_blur(tile, sigma).pixels.astype(np.int64)
    oracle = _dense_blur_oracle(tile.pixels, sigma).astype(np.int64)
    assert np.abs(ours - oracle).max() <= 1


def test_blur_on_impulse_matches_dense_oracle():
    img = np.zeros((16, 16, 3), dtype=np.uint8)
    img[8, 8] = 255
    tile = core.TileImage(img)
    ours = modify.apply_blur(tile, 2.0).pixels.astype(np.int64)
    oracle = _dense_blur_oracle(img, 2.0).astype(np.int64)
    assert np.abs(ours - oracle).max() <= 1


def test_blur_reduces_pixel_variance():
    tile = _tissue_tile(seed=12)
    blurred = modify.apply_blur(tile, modify.blur_sigma_for(tile.n))
    assert blurred.pixels.astype(np.float64).var() < tile.pixels.astype(np.float64).var()


# ---------------------------------------------------------------------------
# Pen mark
# ---------------------------------------------------------------------------


def test_pen_mark_alpha0_is_noop():
    tile = _tissue_tile()
    assert modify.apply_pen_mark(tile, _rng(5, "pm"), alpha=0.0) == tile


def test_pen_mark_channel_directions():
    gray = core.TileImage(np.full((32, 32, 3), 100, dtype=np.uint8))
    out = modify.apply_pen_mark(gray, _rng(6, "pm"))
    covered = (out.pixels != gray.pixels).any(axis=2)
    assert covered.sum() >= 1
    assert (out.pixels[covered][:, 0] > 100).all()  # red strictly up
    assert (out.pixels[covered][:, 1] < 100).all()  # green strictly down
    assert (out.pixels[covered][:, 2] < 100).all()  # blue strictly down


def test_pen_mark_degenerate_endpoints_make_a_dot():
    class Fixed:
        def __init__(self):
            self.calls = 0

        def integers(self, lo, hi, size=None):
            return np.array([9, 9])  # both endpoint draws return (9, 9)

    gray = core.TileImage(np.full((32, 32, 3), 100, dtype=np.uint8))
    out = modify.apply_pen_mark(gray, Fixed())
    covered = (out.pixels != gray.pixels).any(axis=2)
    assert covered[9, 9]
    assert covered.sum() == 1  # width-1 stroke: a single pixel


def test_pen_mark_deterministic():
    tile = _tissue_tile()
    a = modify.apply_pen_mark(tile, _rng(7, "pm"))
    b = modify.apply_pen_mark(tile, _rng(7, "pm"))
    assert a == b
