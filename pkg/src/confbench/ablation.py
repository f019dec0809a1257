"""Feature-based tile removal and its random-removal baseline.

The concept feature is the per-tile mean nucleus area.  A threshold search
finds the area cutoff that best equalizes the per-WSI area-spread statistic
between classes (maximum Welch p-value); ordered removal then deletes the
largest above-threshold tiles from positive WSIs at a given ratio, and a
random baseline removes the same number of tiles per WSI uniformly.  The
study trains one classifier per condition and reports test AUC; tile removal
keeps every surviving pixel identical, so embeddings are reused as row
subsets of the clean dataset's features.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import abmil, features
from .core import ConfbenchError, Wsi, derive_seed, derive_stream
from .metrics import DegenerateSamples, WelchResult, auc, welch_t_test


class CountTooLarge(ConfbenchError):
    """A removal count would leave a WSI with no tiles."""


@dataclass(frozen=True)
class AblationConfig:
    """Threshold search and removal-study knobs."""

    threshold_grid: tuple[float, ...] | None = None  # None: quantile grid from data
    grid_size: int = 41
    removal_ratios: tuple[float, ...] = (0.0, 0.2, 0.5, 0.8, 1.0)
    baseline_replicates: int = 5
    seed: int = 0

    def validate(self) -> None:
        if self.grid_size < 2:
            raise ValueError("grid_size must be >= 2")
        if not self.removal_ratios:
            raise ValueError("removal_ratios must be non-empty")
        if any(not 0.0 <= r <= 1.0 for r in self.removal_ratios):
            raise ValueError("removal ratios must lie in [0, 1]")
        if list(self.removal_ratios) != sorted(self.removal_ratios):
            raise ValueError("removal ratios must be sorted ascending")
        if self.baseline_replicates < 1:
            raise ValueError("baseline_replicates must be >= 1")
        if self.threshold_grid is not None and len(self.threshold_grid) < 1:
            raise ValueError("an explicit threshold_grid must be non-empty")


def _tile_areas(wsi: Wsi) -> list[float | None]:
    return [features.tile_mean_area(img, meta) for img, meta in wsi.tiles]


def default_threshold_grid(wsis: list[Wsi], size: int = 41) -> np.ndarray:
    """Evenly spaced quantiles of the positive-class per-tile mean areas."""
    areas = [a for w in wsis if w.label == 1 for a in _tile_areas(w) if a is not None]
    if not areas:
        raise ValueError("no positive-class tiles with a defined mean nucleus area")
    return np.quantile(np.asarray(areas, dtype=np.float64), np.linspace(0.0, 1.0, size))


def _spread_or_none(values: list[float]) -> float | None:
    defined = [v for v in values if v is not None]
    if len(defined) < 2:
        return None
    return float(np.std(defined))


def sdana_separation(wsis: list[Wsi]) -> WelchResult:
    """Welch test of positive-vs-negative per-WSI area spread.

    WSIs with fewer than two defined tiles carry no spread value and are
    dropped from their class sample.
    """
    pos, neg = [], []
    for w in wsis:
        value = _spread_or_none(_tile_areas(w))
        if value is None:
            continue
        (pos if w.label == 1 else neg).append(value)
    return welch_t_test(pos, neg) if pos and neg else welch_t_test([], [])


def select_threshold(wsis: list[Wsi], grid) -> tuple[float, list[float]]:
    """Pick the grid threshold maximizing the class-separation p-value.

    For each candidate, all positive-WSI tiles above it are hypothetically
    removed and the Welch test re-run.  Thresholds so low that a class sample
    collapses below two WSIs get a NaN p-value and never win; ties go to the
    smallest threshold.
    """
    grid = [float(t) for t in np.asarray(grid, dtype=np.float64)]
    if not grid:
        raise ValueError("threshold grid must be non-empty")
    pos = [w for w in wsis if w.label == 1]
    neg = [w for w in wsis if w.label == 0]
    if not pos or not neg:
        raise ValueError("threshold selection requires both classes")
    pos_areas = [_tile_areas(w) for w in pos]
    neg_spread = [v for v in (_spread_or_none(_tile_areas(w)) for w in neg) if v is not None]

    p_values: list[float] = []
    for theta in grid:
        pos_spread = []
        for areas in pos_areas:
            value = _spread_or_none([a for a in areas if a is None or a <= theta])
            if value is not None:
                pos_spread.append(value)
        try:
            p_values.append(welch_t_test(pos_spread, neg_spread).p_value)
        except DegenerateSamples:
            p_values.append(math.nan)
    best = None
    for theta, p in zip(grid, p_values):
        if not math.isnan(p) and (best is None or p > best[1]):
            best = (theta, p)
    if best is None:
        raise DegenerateSamples("every grid threshold degenerates the class samples")
    return best[0], p_values


# ---------------------------------------------------------------------------
# Removal
# ---------------------------------------------------------------------------


def feature_removal_indices(wsi: Wsi, threshold: float, ratio: float) -> tuple[int, ...]:
    """Tile indices ordered removal would delete from this WSI.

    ceil(ratio * |above-threshold|) tiles, largest mean area first, area ties
    broken toward the lower index; at least one tile always survives.
    Negative WSIs are never touched.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    if wsi.label == 0:
        return ()
    above = [
        (j, a) for j, a in enumerate(_tile_areas(wsi)) if a is not None and a > threshold
    ]
    count = math.ceil(ratio * len(above))
    count = min(count, wsi.num_tiles - 1)  # keep at least one tile
    if count <= 0:
        return ()
    above.sort(key=lambda item: (-item[1], item[0]))
    return tuple(sorted(j for j, _ in above[:count]))


def _without_tiles(wsi: Wsi, removed: tuple[int, ...]) -> Wsi:
    if not removed:
        return wsi
    gone = set(removed)
    tiles = []
    for j, (img, meta) in enumerate(wsi.tiles):
        if j in gone:
            continue
        tiles.append((img, dataclasses.replace(meta, index_in_wsi=len(tiles))))
    return Wsi(
        wsi_id=wsi.wsi_id, label=wsi.label, split=wsi.split, tiles=tuple(tiles), modified=wsi.modified
    )


def ablate_feature_based(wsis: list[Wsi], threshold: float, ratio: float) -> list[Wsi]:
    """Ordered removal across the whole dataset (all splits' positives)."""
    return [_without_tiles(w, feature_removal_indices(w, threshold, ratio)) for w in wsis]


def feature_removal_counts(wsis: list[Wsi], threshold: float, ratio: float) -> dict[str, int]:
    """Per-WSI removal counts of the ordered strategy, for baseline pairing."""
    return {w.wsi_id: len(feature_removal_indices(w, threshold, ratio)) for w in wsis if w.label == 1}


def _random_removed(wsi_id: str, num_tiles: int, count: int, replicate_seed: int) -> tuple[int, ...]:
    if count == 0:
        return ()
    if count > num_tiles - 1:
        raise CountTooLarge(f"{wsi_id}: removing {count} of {num_tiles} tiles leaves nothing")
    rng = derive_stream(replicate_seed, f"ablate/random/{wsi_id}").generator()
    return tuple(sorted(int(j) for j in rng.choice(num_tiles, size=count, replace=False)))


def ablate_random_baseline(
    wsis: list[Wsi], per_wsi_counts: dict[str, int], replicate_seed: int
) -> list[Wsi]:
    """Remove the given number of uniformly random tiles per positive WSI."""
    known = {w.wsi_id: w.label for w in wsis}
    for wsi_id in per_wsi_counts:
        if wsi_id not in known:
            raise ValueError(f"count given for unknown WSI {wsi_id}")
        if known[wsi_id] == 0:
            raise ValueError(f"count given for negative WSI {wsi_id}")
    out = []
    for w in wsis:
        count = per_wsi_counts.get(w.wsi_id, 0) if w.label == 1 else 0
        out.append(_without_tiles(w, _random_removed(w.wsi_id, w.num_tiles, count, replicate_seed)))
    return out


# ---------------------------------------------------------------------------
# Study
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationRow:
    ratio: float
    auc_feature: float
    baseline_aucs: tuple[float, ...]

    @property
    def auc_baseline_mean(self) -> float:
        return float(np.mean(self.baseline_aucs))


@dataclass(frozen=True)
class AblationStudyResult:
    threshold: float
    curve: tuple[tuple[float, float], ...]  # (threshold, p_value)
    rows: tuple[AblationRow, ...]
    curve_path: Path
    results_path: Path


def _fmt(value: float) -> str:
    return f"{value:.10g}"


def run_ablation_study(
    wsis: list[Wsi], cfg: AblationConfig, model_cfg: abmil.AbmilConfig, out_dir: str | Path
) -> AblationStudyResult:
    """Threshold search, then one training per (ratio, strategy, replicate).

    The threshold is selected on the train split only.  Feature-based and
    baseline runs at the same ratio share a model seed, so they differ only
    in which tiles were removed.  Identical surviving-tile sets reuse the
    trained AUC instead of retraining.
    """
    cfg.validate()
    model_cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    train_split = [w for w in wsis if w.split == "train"]
    if cfg.threshold_grid is not None:
        grid = np.asarray(cfg.threshold_grid, dtype=np.float64)
    else:
        grid = default_threshold_grid(train_split, cfg.grid_size)
    threshold, p_values = select_threshold(train_split, grid)

    curve_path = out / "threshold_curve.csv"
    with open(curve_path, "w", encoding="utf-8") as fh:
        fh.write("threshold,p_value\n")
        for theta, p in zip(grid, p_values):
            fh.write(f"{_fmt(float(theta))},{_fmt(p)}\n")

    base_emb = {w.wsi_id: features.extract_wsi(w) for w in wsis}
    auc_memo: dict = {}

    def train_auc(removed_by_id: dict[str, tuple[int, ...]], model_seed: int) -> float:
        key = (model_seed, tuple(sorted(removed_by_id.items())))
        if key in auc_memo:
            return auc_memo[key]
        embedded = []
        for w in wsis:
            removed = set(removed_by_id.get(w.wsi_id, ()))
            keep = [j for j in range(w.num_tiles) if j not in removed]
            embedded.append(
                abmil.EmbeddedWsi(
                    wsi_id=w.wsi_id, label=w.label, split=w.split, embeddings=base_emb[w.wsi_id][keep]
                )
            )
        model, _ = abmil.train(embedded, dataclasses.replace(model_cfg, seed=model_seed))
        probs = {1: [], 0: []}
        for w in embedded:
            if w.split == "test":
                probs[w.label].append(abmil.predict_full(model, w).probability)
        value = auc(probs[1], probs[0])
        auc_memo[key] = value
        return value

    rows = []
    for ratio in cfg.removal_ratios:
        model_seed = derive_seed(cfg.seed, f"ablation/model/{ratio:g}")
        feature_removed = {
            w.wsi_id: feature_removal_indices(w, threshold, ratio) for w in wsis if w.label == 1
        }
        auc_feature = train_auc(feature_removed, model_seed)
        baseline_aucs = []
        for rep in range(cfg.baseline_replicates):
            rep_seed = derive_seed(cfg.seed, f"ablation/baseline/{ratio:g}/{rep}")
            random_removed = {
                w.wsi_id: _random_removed(w.wsi_id, w.num_tiles, len(feature_removed[w.wsi_id]), rep_seed)
                for w in wsis
                if w.label == 1
            }
            baseline_aucs.append(train_auc(random_removed, model_seed))
        rows.append(AblationRow(ratio=ratio, auc_feature=auc_feature, baseline_aucs=tuple(baseline_aucs)))

    results_path = out / "ablation_results.csv"
    replicate_cols = ",".join(f"auc_baseline_{i + 1}" for i in range(cfg.baseline_replicates))
    with open(results_path, "w", encoding="utf-8") as fh:
        fh.write(f"ratio,auc_feature,auc_baseline_mean,{replicate_cols}\n")
        for row in rows:
            reps = ",".join(_fmt(v) for v in row.baseline_aucs)
            fh.write(f"{_fmt(row.ratio)},{_fmt(row.auc_feature)},{_fmt(row.auc_baseline_mean)},{reps}\n")

    return AblationStudyResult(
        threshold=threshold,
        curve=tuple((float(t), p) for t, p in zip(grid, p_values)),
        rows=tuple(rows),
        curve_path=curve_path,
        results_path=results_path,
    )
