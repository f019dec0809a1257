"""Synthetic WSI generator.

Positive slides differ from negative ones only through the *spread* of nucleus
sizes: a fraction of their tiles ("lesion" tiles) draw per-tile mean nucleus
area from a wider, larger distribution.  Total stained area per tile is drawn
from one distribution shared by both classes and rendered with an exact pixel
budget, so per-tile mean intensity carries no class signal; the label is
recoverable only through nucleus-size statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import ConfbenchError, RngStream, TileImage, TileMeta, Wsi, derive_stream

# Split sizing: test fraction of all WSIs, then val as a fraction of the rest.
TEST_FRACTION = 0.3
VAL_FRACTION = 0.2

# Stained ("ink") pixel budget per tile, as fractions of the tile area.  One
# shared distribution for every tile regardless of class or lesion status.
_INK_MEAN_FRACTION = 150.0 / 1024.0
_INK_STD_FRACTION = 25.0 / 1024.0
_INK_CLIP_FRACTION = (90.0 / 1024.0, 230.0 / 1024.0)

# Relative spread of individual nucleus areas around the tile's mean.
_WITHIN_TILE_SPREAD = 0.15

_PLACE_RESTARTS = 64
_PLACE_TRIALS = 128


class PlacementFailure(ConfbenchError):
    """Non-overlapping nucleus placement failed within the retry budget."""


@dataclass(frozen=True)
class GenConfig:
    """Knobs for synthetic dataset generation.  Defaults target 32 px tiles."""

    num_wsis: int = 100
    pos_fraction: float = 0.6
    tiles_per_wsi_range: tuple[int, int] = (64, 256)
    grid_cols: int = 16
    nuclei_per_tile_range: tuple[int, int] = (1, 8)
    neg_nucleus_area: tuple[float, float] = (30.0, 6.0)  # (mean, std) in px^2
    pos_lesion_nucleus_area: tuple[float, float] = (60.0, 30.0)
    lesion_tile_fraction: float = 0.3
    background_color: tuple[int, int, int] = (230, 205, 215)
    nucleus_color: tuple[int, int, int] = (90, 60, 120)
    noise_sigma: float = 4.0  # additive Gaussian pixel noise, intensity levels
    n: int = 32  # tile side in pixels
    seed: int = 0

    def validate(self) -> None:
        if self.num_wsis < 1:
            raise ValueError("num_wsis must be >= 1")
        if not 0.0 <= self.pos_fraction <= 1.0:
            raise ValueError("pos_fraction must lie in [0, 1]")
        lo, hi = self.tiles_per_wsi_range
        if not (1 <= lo <= hi):
            raise ValueError("tiles_per_wsi_range must satisfy 1 <= lo <= hi")
        if self.grid_cols < 1:
            raise ValueError("grid_cols must be >= 1")
        nlo, nhi = self.nuclei_per_tile_range
        if not (1 <= nlo <= nhi):
            raise ValueError("nuclei_per_tile_range must satisfy 1 <= lo <= hi")
        for name in ("neg_nucleus_area", "pos_lesion_nucleus_area"):
            mean, std = getattr(self, name)
            if mean <= 0 or std < 0:
                raise ValueError(f"{name} must have positive mean and non-negative std")
        if self.pos_lesion_nucleus_area[1] <= self.neg_nucleus_area[1]:
            raise ValueError("lesion nucleus-area std must exceed the negative-class std")
        if not 0.0 <= self.lesion_tile_fraction <= 1.0:
            raise ValueError("lesion_tile_fraction must lie in [0, 1]")
        for name in ("background_color", "nucleus_color"):
            color = getattr(self, name)
            if len(color) != 3 or any(not 0 <= int(c) <= 255 for c in color):
                raise ValueError(f"{name} must be an RGB triple in [0, 255]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.n < 8:
            raise ValueError("tile side n must be >= 8")


# ---------------------------------------------------------------------------
# Tile rendering
# ---------------------------------------------------------------------------


def _place_nuclei(
    areas: list[float], n: int, rng: np.random.Generator
) -> list[tuple[float, float, float, float]]:
    """Sample non-overlapping ellipse geometry (cx, cy, sa, sb) per area.

    Largest areas are placed first; the whole layout restarts when one nucleus
    cannot be placed, and a bounded number of restarts ends in PlacementFailure.
    """
    order = sorted(range(len(areas)), key=lambda i: -areas[i])
    for _ in range(_PLACE_RESTARTS):
        placed: dict[int, tuple[float, float, float, float]] = {}
        ok = True
        for idx in order:
            area = areas[idx]
            accepted = None
            for _ in range(_PLACE_TRIALS):
                aspect = rng.uniform(0.6, 1.0)
                sa = math.sqrt(area / (math.pi * aspect))  # horizontal semi-axis
                sb = sa * aspect
                lo_x, hi_x = sa + 1.5, n - 1 - sa - 1.5
                lo_y, hi_y = sb + 1.5, n - 1 - sb - 1.5
                if hi_x < lo_x or hi_y < lo_y:
                    continue
                cx = rng.uniform(lo_x, hi_x)
                cy = rng.uniform(lo_y, hi_y)
                if all(
                    math.hypot(cx - px, cy - py) > sa + psa + 2.0
                    for px, py, psa, _ in placed.values()
                ):
                    accepted = (cx, cy, sa, sb)
                    break
            if accepted is None:
                ok = False
                break
            placed[idx] = accepted
        if ok:
            return [placed[i] for i in range(len(areas))]
    raise PlacementFailure(f"could not place {len(areas)} nuclei in a {n}x{n} tile")


def _rasterize(mask: np.ndarray, cx: float, cy: float, sa: float, sb: float, target: int) -> None:
    """Mark exactly `target` pixels forming the discrete ellipse around (cx, cy).

    Pixels are ranked by normalized ellipse level ((x-cx)/sa)^2 + ((y-cy)/sb)^2
    with raster order breaking ties, and the `target` innermost are selected;
    the blob therefore covers exactly the requested number of pixels.
    """
    n = mask.shape[0]
    r0, r1 = max(0, int(cy - sb - 2)), min(n, int(cy + sb + 3))
    c0, c1 = max(0, int(cx - sa - 2)), min(n, int(cx + sa + 3))
    ys = np.arange(r0, r1, dtype=np.float64)[:, None]
    xs = np.arange(c0, c1, dtype=np.float64)[None, :]
    level = ((xs - cx) / sa) ** 2 + ((ys - cy) / sb) ** 2
    flat = level.ravel()
    pick = np.lexsort((np.arange(flat.size), flat))[:target]
    rows = r0 + pick // (c1 - c0)
    cols = c0 + pick % (c1 - c0)
    mask[rows, cols] = True


def generate_tile(areas: list[float], cfg: GenConfig, rng: np.random.Generator) -> TileImage:
    """Render one tile with the given ground-truth nucleus areas.

    Each area's equivalent-circle diameter must be smaller than the tile side.
    The rendered stained-pixel count equals round(sum(areas)) exactly, split
    across blobs in proportion to the individual areas.
    """
    n = cfg.n
    areas = [float(a) for a in areas]
    for a in areas:
        if a <= 0:
            raise ValueError("nucleus areas must be positive")
        if 2.0 * math.sqrt(a / math.pi) >= n:
            raise ValueError(f"area {a:.1f} px^2 cannot fit a {n}x{n} tile")

    targets = [max(1, round(a)) for a in areas]
    if targets:
        # push rounding residue onto the largest blob so total ink is exact
        largest = max(range(len(areas)), key=lambda i: areas[i])
        targets[largest] += round(sum(areas)) - sum(targets)
        targets[largest] = max(1, targets[largest])

    geometry = _place_nuclei(areas, n, rng) if areas else []
    mask = np.zeros((n, n), dtype=bool)
    for (cx, cy, sa, sb), target in zip(geometry, targets):
        _rasterize(mask, cx, cy, sa, sb, target)

    img = np.empty((n, n, 3), dtype=np.float64)
    img[:, :] = cfg.background_color
    img[mask] = cfg.nucleus_color
    if cfg.noise_sigma > 0:
        img += rng.normal(0.0, cfg.noise_sigma, size=img.shape)
    return TileImage(np.clip(np.rint(img), 0, 255).astype(np.uint8))


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------


def _assign_splits(labels: np.ndarray, rng: np.random.Generator) -> list[str]:
    """Stratified train/val/test assignment; val is VAL_FRACTION of non-test."""
    splits = [""] * len(labels)
    for cls in (1, 0):
        idx = np.flatnonzero(labels == cls)
        idx = rng.permutation(idx)
        n_test = round(TEST_FRACTION * len(idx))
        n_val = round(VAL_FRACTION * (len(idx) - n_test))
        for pos, i in enumerate(idx):
            if pos < n_test:
                splits[i] = "test"
            elif pos < n_test + n_val:
                splits[i] = "val"
            else:
                splits[i] = "train"
    return splits


def _draw_tile_areas(
    lesion: bool, cfg: GenConfig, rng: np.random.Generator
) -> list[float]:
    """Draw ground-truth nucleus areas for one tile.

    The total stained area comes from a class-independent budget; the lesion
    flag only steers the per-tile mean nucleus area (hence the nucleus count),
    which is what the size-variance label signal is made of.
    """
    mean, std = cfg.pos_lesion_nucleus_area if lesion else cfg.neg_nucleus_area
    tile_px = float(cfg.n) * cfg.n
    total = float(
        np.clip(
            rng.normal(_INK_MEAN_FRACTION * tile_px, _INK_STD_FRACTION * tile_px),
            _INK_CLIP_FRACTION[0] * tile_px,
            _INK_CLIP_FRACTION[1] * tile_px,
        )
    )
    mu = float(np.clip(rng.normal(mean, std), max(6.0, mean / 3.0), mean * 7.0 / 3.0))
    lo, hi = cfg.nuclei_per_tile_range
    count = int(np.clip(round(total / mu), lo, hi))
    raw = np.clip(rng.normal(mu, _WITHIN_TILE_SPREAD * mu, size=count), 4.0, None)
    return list(raw * (total / raw.sum()))


def generate_dataset(cfg: GenConfig) -> list[Wsi]:
    """Generate the full synthetic dataset described by `cfg`.

    Deterministic: equal configs (seed included) produce field-identical WSIs.
    Per-WSI randomness comes from streams derived off cfg.seed, so the result
    does not depend on generation order.
    """
    cfg.validate()
    num_pos = round(cfg.pos_fraction * cfg.num_wsis)
    labels = np.array([1] * num_pos + [0] * (cfg.num_wsis - num_pos), dtype=np.int64)
    layout_rng = derive_stream(cfg.seed, "synthgen/layout").generator()
    labels = layout_rng.permutation(labels)
    splits = _assign_splits(labels, layout_rng)

    wsis: list[Wsi] = []
    tiles_lo, tiles_hi = cfg.tiles_per_wsi_range
    for i in range(cfg.num_wsis):
        wsi_id = f"wsi-{i:04d}"
        rng = derive_stream(cfg.seed, f"synthgen/{wsi_id}").generator()
        num_tiles = int(rng.integers(tiles_lo, tiles_hi + 1))
        label = int(labels[i])
        lesion_mask = np.zeros(num_tiles, dtype=bool)
        if label == 1 and cfg.lesion_tile_fraction > 0:
            k = max(1, round(cfg.lesion_tile_fraction * num_tiles))
            lesion_mask[rng.choice(num_tiles, size=min(k, num_tiles), replace=False)] = True

        tiles = []
        for j in range(num_tiles):
            areas = _draw_tile_areas(bool(lesion_mask[j]), cfg, rng)
            img = generate_tile(areas, cfg, rng)
            meta = TileMeta(
                wsi_id=wsi_id,
                index_in_wsi=j,
                grid_pos=(j // cfg.grid_cols, j % cfg.grid_cols),
                nucleus_areas=tuple(areas),
            )
            tiles.append((img, meta))
        wsis.append(Wsi(wsi_id=wsi_id, label=label, split=splits[i], tiles=tuple(tiles)))
    return wsis
