"""Shared domain types, deterministic RNG streams, and dataset serialization.

A dataset is a list of whole-slide images (WSIs); each WSI is an ordered bag
of small RGB tiles plus per-tile metadata.  Everything downstream (generation,
modification, training, metrics) is keyed off explicit seeded streams so that
any run can be reproduced bit-for-bit.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_MASK64 = (1 << 64) - 1

SPLITS = ("train", "val", "test")

# Tile pixel store: 16-byte header, then tiles row-major, 3 bytes per pixel.
TILE_STORE_MAGIC = b"CBTL"
TILE_STORE_VERSION = 1
_TILE_HEADER = struct.Struct("<4sHHQ")  # magic, version, tile side n, tile count

MANIFEST_NAME = "manifest.json"


class ConfbenchError(Exception):
    """Base class for errors raised by this package."""


class FormatError(ConfbenchError):
    """A binary store or manifest does not match its declared layout."""


# ---------------------------------------------------------------------------
# RNG streams
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RngStream:
    """Deterministic random stream identified by a 64-bit (seed, stream_id) pair.

    Two streams with equal fields produce bit-identical draw sequences; any
    difference in either field yields an independent sequence.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        key = np.random.SeedSequence([self.seed & _MASK64, self.stream_id & _MASK64])
        return np.random.Generator(np.random.PCG64(key))


def derive_stream(root_seed: int, purpose_tag: str) -> RngStream:
    """Derive a child stream for a named purpose.

    The mapping is collision-resistant: the stream id is the leading 64 bits
    of SHA-256 over the tag, so distinct tags give independent streams and the
    result never depends on process hash randomization.
    """
    if not purpose_tag:
        raise ValueError("purpose_tag must be a non-empty string")
    digest = hashlib.sha256(purpose_tag.encode("utf-8")).digest()
    return RngStream(seed=root_seed & _MASK64, stream_id=int.from_bytes(digest[:8], "big"))


def derive_seed(root_seed: int, purpose_tag: str) -> int:
    """Collapse (root_seed, purpose_tag) into a fresh 64-bit root seed."""
    if not purpose_tag:
        raise ValueError("purpose_tag must be a non-empty string")
    payload = f"{root_seed & _MASK64}|{purpose_tag}".encode("utf-8")
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "big")


# ---------------------------------------------------------------------------
# Core types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TileImage:
    """Square RGB tile, uint8 pixels of shape (n, n, 3), n >= 8."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.pixels)
        if arr.dtype != np.uint8:
            raise ValueError(f"tile pixels must be uint8, got {arr.dtype}")
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"tile pixels must have shape (n, n, 3), got {arr.shape}")
        if arr.shape[0] != arr.shape[1]:
            raise ValueError(f"tile must be square, got {arr.shape[0]}x{arr.shape[1]}")
        if arr.shape[0] < 8:
            raise ValueError(f"tile side must be >= 8, got {arr.shape[0]}")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    @property
    def n(self) -> int:
        return int(self.pixels.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TileImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(
            np.array_equal(self.pixels, other.pixels)
        )


@dataclass(frozen=True)
class TileMeta:
    """Per-tile bookkeeping carried alongside the pixels.

    nucleus_areas holds the generator's ground-truth blob areas in pixels;
    it is empty for ingested data where no ground truth exists.
    """

    wsi_id: str
    index_in_wsi: int
    grid_pos: tuple[int, int]
    nucleus_areas: tuple[float, ...] = ()
    modified: bool = False

    def __post_init__(self) -> None:
        if self.index_in_wsi < 0:
            raise ValueError("index_in_wsi must be >= 0")
        if len(self.grid_pos) != 2 or any(int(v) < 0 for v in self.grid_pos):
            raise ValueError(f"grid_pos must be a non-negative (row, col), got {self.grid_pos}")
        object.__setattr__(self, "grid_pos", (int(self.grid_pos[0]), int(self.grid_pos[1])))
        areas = tuple(float(a) for a in self.nucleus_areas)
        if any(a <= 0 for a in areas):
            raise ValueError("nucleus areas must be positive")
        object.__setattr__(self, "nucleus_areas", areas)


@dataclass(frozen=True, eq=False)
class Wsi:
    """One whole-slide image: an ordered bag of tiles with a binary label."""

    wsi_id: str
    label: int
    split: str
    tiles: tuple[tuple[TileImage, TileMeta], ...]
    modified: bool = False

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        tiles = tuple(self.tiles)
        if not tiles:
            raise ValueError("a WSI must contain at least one tile")
        n = tiles[0][0].n
        for j, (img, meta) in enumerate(tiles):
            if img.n != n:
                raise ValueError("all tiles in a WSI must share one side length")
            if meta.wsi_id != self.wsi_id:
                raise ValueError(f"tile {j} metadata names WSI {meta.wsi_id!r}, not {self.wsi_id!r}")
            if meta.index_in_wsi != j:
                raise ValueError(f"tile {j} metadata carries index {meta.index_in_wsi}")
        if self.label == 0:
            if self.modified or any(meta.modified for _, meta in tiles):
                raise ValueError("negative-label WSIs must never carry modification flags")
        object.__setattr__(self, "tiles", tiles)

    @property
    def num_tiles(self) -> int:
        return len(self.tiles)

    @property
    def n(self) -> int:
        return self.tiles[0][0].n

    def images(self) -> list[TileImage]:
        return [img for img, _ in self.tiles]

    def metas(self) -> list[TileMeta]:
        return [meta for _, meta in self.tiles]

    def pixel_stack(self) -> np.ndarray:
        """All tile pixels as one (T, n, n, 3) uint8 array."""
        return np.stack([img.pixels for img, _ in self.tiles])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Wsi):
            return NotImplemented
        return (
            self.wsi_id == other.wsi_id
            and self.label == other.label
            and self.split == other.split
            and self.modified == other.modified
            and len(self.tiles) == len(other.tiles)
            and all(
                a_img == b_img and a_meta == b_meta
                for (a_img, a_meta), (b_img, b_meta) in zip(self.tiles, other.tiles)
            )
        )


@dataclass(frozen=True, eq=False)
class Embedding:
    """Fixed-length real feature vector for one tile."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError(f"embedding must be a non-empty 1-D vector, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("embedding values must be finite")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def k(self) -> int:
        return int(self.values.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Embedding):
            return NotImplemented
        return bool(np.array_equal(self.values, other.values))


# ---------------------------------------------------------------------------
# Dataset serialization
# ---------------------------------------------------------------------------


def _split_store_name(split: str) -> str:
    return f"tiles_{split}.bin"


def save_dataset(wsis: list[Wsi], out_dir: str | Path) -> Path:
    """Write a manifest plus one tile pixel store per split.

    Returns the manifest path.  Tiles are stored in manifest order: WSIs in
    list order, tiles of one WSI consecutive; `offset` in the manifest is the
    index of a WSI's first tile within its split store.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sides = {w.n for w in wsis}
    if len(sides) > 1:
        raise ValueError(f"all WSIs must share one tile side, got {sorted(sides)}")
    n = sides.pop() if sides else 0

    entries = []
    offsets = {split: 0 for split in SPLITS}
    buffers: dict[str, list[np.ndarray]] = {split: [] for split in SPLITS}
    for wsi in wsis:
        entry = {
            "id": wsi.wsi_id,
            "label": wsi.label,
            "split": wsi.split,
            "tile_count": wsi.num_tiles,
            "offset": offsets[wsi.split],
            "modified": wsi.modified,
            "tiles": [
                {
                    "grid_pos": list(meta.grid_pos),
                    "nucleus_areas": list(meta.nucleus_areas),
                    "modified": meta.modified,
                }
                for _, meta in wsi.tiles
            ],
        }
        entries.append(entry)
        buffers[wsi.split].append(wsi.pixel_stack())
        offsets[wsi.split] += wsi.num_tiles

    for split in SPLITS:
        chunks = buffers[split]
        count = offsets[split]
        path = out / _split_store_name(split)
        with open(path, "wb") as fh:
            fh.write(_TILE_HEADER.pack(TILE_STORE_MAGIC, TILE_STORE_VERSION, n, count))
            for chunk in chunks:
                fh.write(np.ascontiguousarray(chunk).tobytes())

    manifest = {
        "format": "confbench-dataset",
        "version": 1,
        "n": n,
        "wsis": entries,
    }
    manifest_path = out / MANIFEST_NAME
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return manifest_path


def _read_store(path: Path, expect_n: int) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(_TILE_HEADER.size)
        if len(header) != _TILE_HEADER.size:
            raise FormatError(f"{path}: truncated header")
        magic, version, n, count = _TILE_HEADER.unpack(header)
        if magic != TILE_STORE_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != TILE_STORE_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        if n != expect_n:
            raise FormatError(f"{path}: tile side {n} does not match manifest {expect_n}")
        payload = fh.read()
    expected = count * n * n * 3
    if len(payload) != expected:
        raise FormatError(f"{path}: expected {expected} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(count, n, n, 3)


def load_dataset(in_dir: str | Path) -> list[Wsi]:
    """Read a dataset written by :func:`save_dataset`."""
    root = Path(in_dir)
    with open(root / MANIFEST_NAME, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "confbench-dataset":
        raise FormatError(f"{root}: not a dataset manifest")
    n = int(manifest["n"])

    stores: dict[str, np.ndarray] = {}
    wsis: list[Wsi] = []
    for entry in manifest["wsis"]:
        split = entry["split"]
        if split not in stores:
            stores[split] = _read_store(root / _split_store_name(split), n)
        store = stores[split]
        offset, count = int(entry["offset"]), int(entry["tile_count"])
        if offset + count > store.shape[0]:
            raise FormatError(f"WSI {entry['id']}: tile range exceeds {split} store")
        tiles = []
        for j in range(count):
            tmeta = entry["tiles"][j]
            meta = TileMeta(
                wsi_id=entry["id"],
                index_in_wsi=j,
                grid_pos=tuple(tmeta["grid_pos"]),
                nucleus_areas=tuple(tmeta["nucleus_areas"]),
                modified=bool(tmeta["modified"]),
            )
            tiles.append((TileImage(store[offset + j]), meta))
        wsis.append(
            Wsi(
                wsi_id=entry["id"],
                label=int(entry["label"]),
                split=split,
                tiles=tuple(tiles),
                modified=bool(entry["modified"]),
            )
        )
    return wsis
