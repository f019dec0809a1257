"""Confounder injection: sampling modification plans and applying pixel edits.

A plan realizes per-WSI and per-tile Bernoulli flags for one (modifier,
design, probability) condition.  Tile-based designs flag every positive WSI
and each of its tiles independently with probability p; WSI-based designs
flag positive WSIs with probability p and tiles inside flagged WSIs at 0.5.
Negative-label WSIs are never flagged, whatever the design or probability.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import ConfbenchError, RngStream, TileImage, Wsi, derive_stream


class UnknownModifier(ConfbenchError):
    """A plan with flagged tiles names no applicable modifier."""


class Modifier(str, enum.Enum):
    CLEVER_HANS = "clever-hans"
    BLUR = "blur"
    PEN_MARK = "pen-mark"
    NONE = "none"


class Design(str, enum.Enum):
    TILE_BASED = "tile"
    WSI_BASED = "wsi"


# Modifier constants: text overlay opacity, pen opacity, pen color.
CLEVER_HANS_ALPHA = 0.5
PEN_ALPHA = 0.6
PEN_COLOR = (255, 0, 0)
GLYPH_COLOR = (0, 0, 0)


def blur_sigma_for(n: int) -> float:
    """Blur strength scaled to the tile side (4.0 at n=256)."""
    return 4.0 * n / 256.0


def pen_width_for(n: int) -> int:
    """Pen stroke width in pixels scaled to the tile side, at least 1."""
    return max(1, n // 64)


# ---------------------------------------------------------------------------
# Plans
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ModificationPlan:
    """Realized modification flags for one condition.

    tile_flags maps wsi id -> bool array over that WSI's tiles.  Tile flags
    are false wherever the WSI flag is false.
    """

    modifier: Modifier
    design: Design
    p: float
    seed: int
    wsi_flags: dict[str, bool]
    tile_flags: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")
        if set(self.wsi_flags) != set(self.tile_flags):
            raise ValueError("wsi_flags and tile_flags must cover the same WSI ids")
        for wsi_id, flags in self.tile_flags.items():
            flags = np.asarray(flags, dtype=bool)
            if not self.wsi_flags[wsi_id] and flags.any():
                raise ValueError(f"WSI {wsi_id}: tile flags set while the WSI flag is false")
            self.tile_flags[wsi_id] = flags

    def num_flagged_tiles(self) -> int:
        return int(sum(f.sum() for f in self.tile_flags.values()))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModificationPlan):
            return NotImplemented
        return (
            self.modifier == other.modifier
            and self.design == other.design
            and self.p == other.p
            and self.seed == other.seed
            and self.wsi_flags == other.wsi_flags
            and set(self.tile_flags) == set(other.tile_flags)
            and all(np.array_equal(self.tile_flags[k], other.tile_flags[k]) for k in self.tile_flags)
        )


def sample_plan(
    wsis: list[Wsi], modifier: Modifier, design: Design, p: float, seed: int
) -> ModificationPlan:
    """Draw a fresh plan for the given dataset and condition.

    Flags for each WSI come from streams derived off (seed, wsi id), so the
    realization is independent of dataset ordering and reproducible.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    wsi_flags: dict[str, bool] = {}
    tile_flags: dict[str, np.ndarray] = {}
    for wsi in wsis:
        if wsi.label == 0:
            wsi_flags[wsi.wsi_id] = False
            tile_flags[wsi.wsi_id] = np.zeros(wsi.num_tiles, dtype=bool)
            continue
        if design is Design.TILE_BASED:
            flagged = True
            tile_p = p
        else:
            wsi_rng = derive_stream(seed, f"plan/wsi/{wsi.wsi_id}").generator()
            flagged = bool(wsi_rng.random() < p)
            tile_p = 0.5
        wsi_flags[wsi.wsi_id] = flagged
        if flagged and tile_p > 0.0:
            tile_rng = derive_stream(seed, f"plan/tiles/{wsi.wsi_id}").generator()
            tile_flags[wsi.wsi_id] = tile_rng.random(wsi.num_tiles) < tile_p
        else:
            tile_flags[wsi.wsi_id] = np.zeros(wsi.num_tiles, dtype=bool)
    return ModificationPlan(
        modifier=modifier, design=design, p=p, seed=seed, wsi_flags=wsi_flags, tile_flags=tile_flags
    )


def apply_plan(wsis: list[Wsi], plan: ModificationPlan) -> list[Wsi]:
    """Apply a plan, returning one output WSI per input in the same order.

    Flagged tiles are re-rendered by the plan's modifier; everything else is
    byte-identical to the input (untouched WSIs are returned as the same
    immutable object).  A WSI's `modified` flag is set when it is flagged and
    at least one of its tiles actually changed, so a p=0 plan is a no-op.
    """
    out: list[Wsi] = []
    for wsi in wsis:
        if wsi.wsi_id not in plan.tile_flags:
            raise ValueError(f"plan does not cover WSI {wsi.wsi_id}")
        flags = plan.tile_flags[wsi.wsi_id]
        if flags.shape[0] != wsi.num_tiles:
            raise ValueError(f"plan flag length {flags.shape[0]} != {wsi.num_tiles} tiles")
        if not (plan.wsi_flags[wsi.wsi_id] and flags.any()):
            out.append(wsi)
            continue
        if plan.modifier is Modifier.NONE:
            raise UnknownModifier("plan flags tiles but names no modifier")
        tiles = []
        for j, (img, meta) in enumerate(wsi.tiles):
            if flags[j]:
                rng = derive_stream(plan.seed, f"apply/{wsi.wsi_id}/{j}").generator()
                img = modify_tile(img, plan.modifier, rng)
                meta = dataclasses.replace(meta, modified=True)
            tiles.append((img, meta))
        out.append(
            Wsi(wsi_id=wsi.wsi_id, label=wsi.label, split=wsi.split, tiles=tuple(tiles), modified=True)
        )
    return out


def modify_tile(tile: TileImage, modifier: Modifier, rng: np.random.Generator) -> TileImage:
    """Apply one modifier with its tile-side-scaled default parameters."""
    if modifier is Modifier.BLUR:
        return apply_blur(tile, blur_sigma_for(tile.n))
    if modifier is Modifier.CLEVER_HANS:
        return apply_clever_hans(tile, rng)
    if modifier is Modifier.PEN_MARK:
        return apply_pen_mark(tile, rng)
    raise UnknownModifier(f"no pixel operation for modifier {modifier!r}")


# ---------------------------------------------------------------------------
# Plan serialization (JSON with run-length-encoded tile flags)
# ---------------------------------------------------------------------------


def _rle_encode(flags: np.ndarray) -> list[int]:
    """Run lengths of alternating values, first run counting False."""
    flags = np.asarray(flags, dtype=bool)
    if flags.size == 0:
        return []
    switches = np.flatnonzero(np.diff(flags)) + 1
    bounds = np.concatenate(([0], switches, [flags.size]))
    runs = np.diff(bounds).tolist()
    if flags[0]:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def _rle_decode(runs: list[int], length: int) -> np.ndarray:
    out = np.zeros(length, dtype=bool)
    pos, value = 0, False
    for run in runs:
        if run < 0 or pos + run > length:
            raise ValueError("run-length data does not fit the declared tile count")
        if value:
            out[pos : pos + run] = True
        pos += run
        value = not value
    if pos != length:
        raise ValueError("run-length data does not cover the declared tile count")
    return out


def save_plan(plan: ModificationPlan, path: str | Path) -> None:
    doc = {
        "format": "confbench-plan",
        "version": 1,
        "modifier": plan.modifier.value,
        "design": plan.design.value,
        "p": plan.p,
        "seed": plan.seed,
        "wsis": [
            {
                "id": wsi_id,
                "flag": plan.wsi_flags[wsi_id],
                "tile_count": int(plan.tile_flags[wsi_id].size),
                "runs": _rle_encode(plan.tile_flags[wsi_id]),
            }
            for wsi_id in plan.wsi_flags
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_plan(path: str | Path) -> ModificationPlan:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "confbench-plan":
        raise ValueError(f"{path}: not a modification plan")
    return ModificationPlan(
        modifier=Modifier(doc["modifier"]),
        design=Design(doc["design"]),
        p=float(doc["p"]),
        seed=int(doc["seed"]),
        wsi_flags={e["id"]: bool(e["flag"]) for e in doc["wsis"]},
        tile_flags={e["id"]: _rle_decode(e["runs"], int(e["tile_count"])) for e in doc["wsis"]},
    )


# ---------------------------------------------------------------------------
# Text overlay
# ---------------------------------------------------------------------------

_FONT_5X7 = {
    "C": (" ### ", "#   #", "#    ", "#    ", "#    ", "#   #", " ### "),
    "H": ("#   #", "#   #", "#   #", "#####", "#   #", "#   #", "#   #"),
    "a": ("     ", "     ", " ### ", "    #", " ####", "#   #", " ####"),
    "e": ("     ", "     ", " ### ", "#   #", "#####", "#    ", " ### "),
    "l": (" ##  ", "  #  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "),
    "n": ("     ", "     ", "# ## ", "##  #", "#   #", "#   #", "#   #"),
    "r": ("     ", "     ", "# ## ", "##  #", "#    ", "#    ", "#    "),
    "s": ("     ", "     ", " ####", "#    ", " ### ", "    #", "#### "),
    "v": ("     ", "     ", "#   #", "#   #", "#   #", " # # ", "  #  "),
}

_TEXT_LINES = ("Clever", "Hans")


def _line_bitmap(text: str) -> np.ndarray:
    cols = []
    for i, ch in enumerate(text):
        if i:
            cols.append(np.zeros((7, 1), dtype=bool))
        glyph = np.array([[c == "#" for c in row] for row in _FONT_5X7[ch]], dtype=bool)
        cols.append(glyph)
    return np.hstack(cols)


def _text_bitmap() -> np.ndarray:
    """Two-line text block at native font resolution (15 x 35)."""
    lines = [_line_bitmap(t) for t in _TEXT_LINES]
    width = max(b.shape[1] for b in lines)
    rows = []
    for i, bitmap in enumerate(lines):
        if i:
            rows.append(np.zeros((1, width), dtype=bool))
        pad = width - bitmap.shape[1]
        left = pad // 2
        rows.append(np.pad(bitmap, ((0, 0), (left, pad - left))))
    return np.vstack(rows)


_BASE_TEXT = _text_bitmap()


def glyph_mask(n: int) -> np.ndarray:
    """Text mask scaled so its rotated bounding box fits any n x n tile.

    The block diagonal is held at 0.8 n, which leaves the text height around
    a third of the tile and guarantees a valid placement at every rotation.
    """
    h0, w0 = _BASE_TEXT.shape
    scale = 0.8 * n / math.hypot(w0, h0)
    hs = max(1, round(h0 * scale))
    ws = max(1, round(w0 * scale))
    rows = np.minimum((np.arange(hs) + 0.5) * h0 / hs, h0 - 1).astype(np.int64)
    cols = np.minimum((np.arange(ws) + 0.5) * w0 / ws, w0 - 1).astype(np.int64)
    return _BASE_TEXT[np.ix_(rows, cols)]


def _rotate_mask(mask: np.ndarray, deg: float) -> np.ndarray:
    """Nearest-neighbor rotation into a tight output bounding box."""
    theta = math.radians(deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    hs, ws = mask.shape
    out_w = math.ceil(ws * abs(cos_t) + hs * abs(sin_t))
    out_h = math.ceil(ws * abs(sin_t) + hs * abs(cos_t))
    rr, cc = np.meshgrid(np.arange(out_h), np.arange(out_w), indexing="ij")
    dx = cc + 0.5 - out_w / 2.0
    dy = rr + 0.5 - out_h / 2.0
    src_x = cos_t * dx + sin_t * dy + ws / 2.0
    src_y = -sin_t * dx + cos_t * dy + hs / 2.0
    col = np.floor(src_x).astype(np.int64)
    row = np.floor(src_y).astype(np.int64)
    valid = (row >= 0) & (row < hs) & (col >= 0) & (col < ws)
    out = np.zeros((out_h, out_w), dtype=bool)
    out[valid] = mask[row[valid], col[valid]]
    return out


def apply_clever_hans(
    tile: TileImage,
    rng: np.random.Generator,
    *,
    alpha: float = CLEVER_HANS_ALPHA,
    rotation_deg: float | None = None,
    position: tuple[int, int] | None = None,
) -> TileImage:
    """Alpha-composite the text block at a random rotation and position.

    Rotation is drawn uniformly from [0, 360) first, then the top-left corner
    uniformly over all placements keeping the rotated box inside the tile.
    Pixels outside the rotated bounding box are untouched.
    """
    n = tile.n
    if rotation_deg is None:
        rotation_deg = float(rng.uniform(0.0, 360.0))
    stamp = _rotate_mask(glyph_mask(n), rotation_deg)
    h, w = stamp.shape
    if position is None:
        position = (int(rng.integers(0, n - h + 1)), int(rng.integers(0, n - w + 1)))
    r0, c0 = position
    if not (0 <= r0 <= n - h and 0 <= c0 <= n - w):
        raise ValueError(f"stamp of {h}x{w} does not fit at position {position}")
    out = tile.pixels.astype(np.float64)
    region = out[r0 : r0 + h, c0 : c0 + w]
    color = np.array(GLYPH_COLOR, dtype=np.float64)
    region[stamp] = alpha * color + (1.0 - alpha) * region[stamp]
    return TileImage(np.clip(np.rint(out), 0, 255).astype(np.uint8))


# ---------------------------------------------------------------------------
# Blur
# ---------------------------------------------------------------------------


def apply_blur(tile: TileImage, sigma: float) -> TileImage:
    """Separable Gaussian blur with kernel radius ceil(3 sigma).

    Reflect padding at the borders (edge row not repeated); the result is
    rounded to uint8 once at the end and clamped to [0, 255].
    """
    if sigma <= 0:
        return tile
    radius = math.ceil(3.0 * sigma)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(xs**2) / (2.0 * sigma * sigma))
    kernel /= kernel.sum()

    img = tile.pixels.astype(np.float64)
    padded = np.pad(img, ((0, 0), (radius, radius), (0, 0)), mode="reflect")
    n = tile.n
    horiz = np.zeros_like(img)
    for i, k in enumerate(kernel):
        horiz += k * padded[:, i : i + n, :]
    padded = np.pad(horiz, ((radius, radius), (0, 0), (0, 0)), mode="reflect")
    result = np.zeros_like(img)
    for i, k in enumerate(kernel):
        result += k * padded[i : i + n, :, :]
    return TileImage(np.clip(np.rint(result), 0, 255).astype(np.uint8))


# ---------------------------------------------------------------------------
# Pen mark
# ---------------------------------------------------------------------------


def apply_pen_mark(
    tile: TileImage,
    rng: np.random.Generator,
    *,
    alpha: float = PEN_ALPHA,
    width: int | None = None,
) -> TileImage:
    """Alpha-composite a straight red stroke between two random points.

    Endpoints are drawn uniformly over the pixel grid (rows then columns).
    Coinciding endpoints degenerate to a dot of the stroke width.
    """
    n = tile.n
    if width is None:
        width = pen_width_for(n)
    r0, r1 = (int(v) for v in rng.integers(0, n, size=2))
    c0, c1 = (int(v) for v in rng.integers(0, n, size=2))

    rr, cc = np.meshgrid(np.arange(n, dtype=np.float64), np.arange(n, dtype=np.float64), indexing="ij")
    dr, dc = r1 - r0, c1 - c0
    seg_sq = float(dr * dr + dc * dc)
    if seg_sq == 0.0:
        dist = np.hypot(rr - r0, cc - c0)
    else:
        t = np.clip(((rr - r0) * dr + (cc - c0) * dc) / seg_sq, 0.0, 1.0)
        dist = np.hypot(rr - (r0 + t * dr), cc - (c0 + t * dc))
    covered = dist <= width / 2.0

    out = tile.pixels.astype(np.float64)
    color = np.array(PEN_COLOR, dtype=np.float64)
    out[covered] = alpha * color + (1.0 - alpha) * out[covered]
    return TileImage(np.clip(np.rint(out), 0, 255).astype(np.uint8))
