"""Hand-crafted 32-dim tile embeddings and the nucleus-size-variance statistic.

The embedding concatenates, in fixed order: per-channel means and stds (6),
an 8-bin intensity histogram (8), gradient-magnitude mean/std (2), Laplacian
variance (1), red-excess mean (1), blob count and blob-area mean/std (3),
edge density in four orientations (4), and a 7-band intensity profile (7).
The components are chosen so each pixel modifier moves at least one of them:
blurring lowers the Laplacian variance, a red pen stroke raises red excess,
and stamped text raises edge density.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import ConfbenchError, Embedding, TileImage, TileMeta, Wsi

FEATURE_DIM = 32

IDX_CHANNEL_MEANS = slice(0, 3)
IDX_CHANNEL_STDS = slice(3, 6)
IDX_HISTOGRAM = slice(6, 14)
IDX_GRAD_MEAN = 14
IDX_GRAD_STD = 15
IDX_SHARPNESS = 16
IDX_RED_EXCESS = 17
IDX_BLOB_COUNT = 18
IDX_BLOB_AREA_MEAN = 19
IDX_BLOB_AREA_STD = 20
IDX_EDGE_DENSITY = slice(21, 25)
IDX_PROFILE = slice(25, 32)

# Blob segmentation: tiles whose intensity span is below this are treated as
# blob-free (noise-only span is ~15 levels, nucleus-background contrast ~125).
_BLOB_SPAN_MIN = 48.0
# Gradient magnitude above which a pixel counts as an edge pixel.
_EDGE_THRESHOLD = 24.0

# Embedding store: 16-byte header, then float32 rows in manifest order.
EMBED_STORE_MAGIC = b"CBEM"
EMBED_STORE_VERSION = 1
_EMBED_HEADER = struct.Struct("<4sHHQ")  # magic, version, k, row count

# within-slice 4-connectivity, no connectivity across the stack axis
_STACK_STRUCTURE = np.zeros((3, 3, 3), dtype=bool)
_STACK_STRUCTURE[1] = [[0, 1, 0], [1, 1, 1], [0, 1, 0]]


class InsufficientTiles(ConfbenchError):
    """Fewer than two tiles with a defined mean nucleus area."""


def _blob_mask(intensity: np.ndarray) -> np.ndarray:
    """Dark-pixel mask per tile for a (T, n, n) intensity stack."""
    lo = intensity.min(axis=(1, 2))
    hi = intensity.max(axis=(1, 2))
    mask = intensity < ((lo + hi) / 2.0)[:, None, None]
    mask[(hi - lo) <= _BLOB_SPAN_MIN] = False
    return mask


def _blob_areas_stack(intensity: np.ndarray) -> list[np.ndarray]:
    """Connected-component areas per tile of a (T, n, n) intensity stack."""
    labels, _ = ndimage.label(_blob_mask(intensity), structure=_STACK_STRUCTURE)
    # labels are assigned in raster order, so each slice owns a contiguous range
    highs = labels.max(axis=(1, 2))
    all_areas = np.bincount(labels.ravel())[1:]
    out, prev = [], 0
    for hi in highs:
        out.append(all_areas[prev:hi].astype(np.float64))
        prev = max(prev, hi)
    return out


def blob_areas(pixels: np.ndarray) -> np.ndarray:
    """Areas (pixel counts) of dark blobs in one RGB tile."""
    intensity = np.asarray(pixels, dtype=np.float64).mean(axis=2)
    return _blob_areas_stack(intensity[None])[0]


def _extract_stack(px: np.ndarray) -> np.ndarray:
    """Feature matrix (T, 32) for a (T, n, n, 3) uint8 pixel stack."""
    px = np.asarray(px, dtype=np.float64)
    t, n = px.shape[0], px.shape[1]
    intensity = px.mean(axis=3)
    out = np.zeros((t, FEATURE_DIM), dtype=np.float64)

    out[:, IDX_CHANNEL_MEANS] = px.mean(axis=(1, 2))
    out[:, IDX_CHANNEL_STDS] = px.std(axis=(1, 2))

    bins = np.minimum(intensity.astype(np.int64) >> 5, 7)
    offsets = (np.arange(t, dtype=np.int64) * 8)[:, None, None]
    hist = np.bincount((bins + offsets).ravel(), minlength=t * 8).reshape(t, 8)
    out[:, IDX_HISTOGRAM] = hist / float(n * n)

    gy, gx = np.gradient(intensity, axis=(1, 2))
    mag = np.hypot(gx, gy)
    out[:, IDX_GRAD_MEAN] = mag.mean(axis=(1, 2))
    out[:, IDX_GRAD_STD] = mag.std(axis=(1, 2))

    core_px = intensity[:, 1:-1, 1:-1]
    lap = (
        intensity[:, :-2, 1:-1]
        + intensity[:, 2:, 1:-1]
        + intensity[:, 1:-1, :-2]
        + intensity[:, 1:-1, 2:]
        - 4.0 * core_px
    )
    out[:, IDX_SHARPNESS] = lap.var(axis=(1, 2))

    out[:, IDX_RED_EXCESS] = (px[..., 0] - 0.5 * (px[..., 1] + px[..., 2])).mean(axis=(1, 2))

    for i, areas in enumerate(_blob_areas_stack(intensity)):
        out[i, IDX_BLOB_COUNT] = areas.size
        if areas.size:
            out[i, IDX_BLOB_AREA_MEAN] = areas.mean()
            out[i, IDX_BLOB_AREA_STD] = areas.std()

    orient = np.mod(np.arctan2(gy, gx), np.pi)
    obin = np.mod(np.rint(orient / (np.pi / 4.0)).astype(np.int64), 4)
    edge = mag > _EDGE_THRESHOLD
    flat = np.where(edge, obin, 4) + (np.arange(t, dtype=np.int64) * 5)[:, None, None]
    counts = np.bincount(flat.ravel(), minlength=t * 5).reshape(t, 5)
    out[:, IDX_EDGE_DENSITY] = counts[:, :4] / float(n * n)

    bands = np.array_split(intensity, 7, axis=1)
    out[:, IDX_PROFILE] = np.stack([b.mean(axis=(1, 2)) for b in bands], axis=1)
    return out


def extract(tile: TileImage) -> Embedding:
    """32-dim embedding of one tile.  Deterministic, no randomness involved."""
    return Embedding(_extract_stack(tile.pixels[None])[0])


def extract_wsi(wsi: Wsi) -> np.ndarray:
    """Embeddings for every tile of a WSI as a (T, 32) float64 matrix."""
    return _extract_stack(wsi.pixel_stack())


# ---------------------------------------------------------------------------
# Nucleus-size-variance statistic
# ---------------------------------------------------------------------------


def tile_mean_area(tile: TileImage, meta: TileMeta) -> float | None:
    """Mean nucleus area of one tile, or None when undefined.

    Ground-truth areas from the generator take precedence; for ingested data
    (empty ground truth) a blob-segmentation estimate is used.  A tile with no
    detectable nuclei has no defined value.
    """
    if meta.nucleus_areas:
        return float(np.mean(meta.nucleus_areas))
    areas = blob_areas(tile.pixels)
    return float(areas.mean()) if areas.size else None


def sdana(wsi: Wsi) -> float:
    """Population std of per-tile mean nucleus areas across a WSI.

    Tiles without a defined mean area are excluded; fewer than two remaining
    tiles raise InsufficientTiles.
    """
    values = [v for v in (tile_mean_area(img, meta) for img, meta in wsi.tiles) if v is not None]
    if len(values) < 2:
        raise InsufficientTiles(
            f"WSI {wsi.wsi_id}: {len(values)} tile(s) with defined mean nucleus area"
        )
    return float(np.std(values))


# ---------------------------------------------------------------------------
# Embedding store
# ---------------------------------------------------------------------------


def write_embedding_store(path: str | Path, matrix: np.ndarray) -> None:
    """Write a (rows, k) matrix as float32 rows behind a 16-byte header."""
    matrix = np.asarray(matrix, dtype=np.float32)
    if matrix.ndim != 2:
        raise ValueError(f"embedding matrix must be 2-D, got shape {matrix.shape}")
    rows, k = matrix.shape
    with open(path, "wb") as fh:
        fh.write(_EMBED_HEADER.pack(EMBED_STORE_MAGIC, EMBED_STORE_VERSION, k, rows))
        fh.write(np.ascontiguousarray(matrix).tobytes())


def read_embedding_store(path: str | Path) -> np.ndarray:
    """Read a store written by :func:`write_embedding_store`."""
    from .core import FormatError

    with open(path, "rb") as fh:
        header = fh.read(_EMBED_HEADER.size)
        if len(header) != _EMBED_HEADER.size:
            raise FormatError(f"{path}: truncated header")
        magic, version, k, rows = _EMBED_HEADER.unpack(header)
        if magic != EMBED_STORE_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != EMBED_STORE_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        payload = fh.read()
    if len(payload) != rows * k * 4:
        raise FormatError(f"{path}: expected {rows * k * 4} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, k).copy()
