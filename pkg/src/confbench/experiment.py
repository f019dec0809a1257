"""Confounding sweeps: one model per contamination level, paired evaluation.

A sweep fixes a planting design and a modifier, then walks a grid of
contamination probabilities.  Each grid point trains a fresh model on a
planted copy of the train/val splits and evaluates the held-out test split
twice per WSI (pristine and planted) so that flip-based and attention-based
interpretability scores can be computed alongside plain AUC.  Everything a
condition produces lands in its own directory and can be re-summarized
without recomputation.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import abmil, features, metrics
from .abmil import AbmilConfig, AbmilModel, AttentionMap, EmbeddedWsi
from .core import ConfbenchError, Wsi, derive_seed
from .metrics import InterpretabilityReport, PairedEval
from .modify import Design, Modifier, apply_plan, sample_plan

DEFAULT_P_GRID = (0.0, 0.2, 0.5, 0.8, 1.0)
HEATMAP_CELL = 8  # pixels per tile in rendered attention maps
OUTLINE_COLOR = (255, 64, 64)

SUMMARY_COLUMNS = ("design", "modifier", "p", "auc", "cr", "ncc", "sbar_size")
METRICS_COLUMNS = (
    "wsi_id",
    "label",
    "prob_clean",
    "prob_modified",
    "flipped",
    "prevalence",
    "precision_at_top",
    "attention_correlation",
)


class GridMismatch(ConfbenchError):
    """Attention weights cannot be laid out on the requested tile grid."""


def _fmt(value: float) -> str:
    return f"{value:.10g}"


@dataclass(frozen=True)
class SweepSpec:
    """Immutable description of one sweep; hashes to a stable directory name."""

    design: Design
    modifier: Modifier
    p_grid: tuple[float, ...] = DEFAULT_P_GRID
    model_cfg: AbmilConfig = field(default_factory=AbmilConfig)
    root_seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "design", Design(self.design))
        object.__setattr__(self, "modifier", Modifier(self.modifier))
        object.__setattr__(self, "p_grid", tuple(float(p) for p in self.p_grid))

    def validate(self) -> None:
        if self.modifier is Modifier.NONE:
            raise ValueError("sweep modifier must be a real modifier, not 'none'")
        if not self.p_grid:
            raise ValueError("p_grid must not be empty")
        if any(not 0.0 <= p <= 1.0 for p in self.p_grid):
            raise ValueError(f"p_grid values must lie in [0, 1], got {self.p_grid}")
        if list(self.p_grid) != sorted(set(self.p_grid)):
            raise ValueError(f"p_grid must be strictly increasing, got {self.p_grid}")
        self.model_cfg.validate()

    def to_json_dict(self) -> dict:
        return {
            "design": self.design.value,
            "modifier": self.modifier.value,
            "p_grid": list(self.p_grid),
            "model_cfg": dataclasses.asdict(self.model_cfg),
            "root_seed": self.root_seed,
        }

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]

    def condition_name(self, p: float) -> str:
        return f"{self.design.value}-{self.modifier.value}-p{p * 100:g}"

    def seeds_for(self, p: float) -> tuple[int, int, int]:
        """(train plan, test plan, model) seeds for one grid point."""
        tag = f"{self.design.value}/{self.modifier.value}/p{p:g}"
        return (
            derive_seed(self.root_seed, f"plan-train/{tag}"),
            derive_seed(self.root_seed, f"plan-test/{tag}"),
            derive_seed(self.root_seed, f"model/{tag}"),
        )


@dataclass(frozen=True)
class RunRecord:
    """Everything needed to audit or reproduce one sweep condition."""

    spec_hash: str
    design: Design
    modifier: Modifier
    p: float
    train_plan_seed: int
    test_plan_seed: int
    model_seed: int
    checkpoint: str | None
    auc: float | None
    cr: float | None
    ncc: float | None
    sbar_size: int | None
    ncc_excluded: int | None
    wall_time: float
    failed: bool = False
    error: str | None = None

    def to_json_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["design"] = self.design.value
        d["modifier"] = self.modifier.value
        return d

    @staticmethod
    def from_json_dict(d: dict) -> "RunRecord":
        d = dict(d)
        d["design"] = Design(d["design"])
        d["modifier"] = Modifier(d["modifier"])
        return RunRecord(**d)


@dataclass
class ConditionResult:
    """In-memory artifacts of one condition, before persistence."""

    record: RunRecord
    model: AbmilModel | None = None
    report: InterpretabilityReport | None = None
    evals: list[PairedEval] = field(default_factory=list)
    labels: dict[str, int] = field(default_factory=dict)


def clean_features(wsis: list[Wsi]) -> dict[str, np.ndarray]:
    """Embed every tile of every WSI once, keyed by WSI id."""
    return {w.wsi_id: features.extract_wsi(w) for w in wsis}


def _patched_embeddings(
    base: np.ndarray, applied: Wsi, flags: np.ndarray
) -> np.ndarray:
    """Re-embed only the tiles a plan touched; everything else is reused."""
    if not flags.any():
        return base
    rows = base.copy()
    for j in np.flatnonzero(flags):
        rows[j] = features.extract(applied.tiles[j][0]).values
    return rows


def _embed_applied(
    originals: list[Wsi],
    applied: list[Wsi],
    tile_flags: dict[str, np.ndarray],
    base: dict[str, np.ndarray],
) -> list[EmbeddedWsi]:
    out = []
    for orig, mod in zip(originals, applied):
        emb = _patched_embeddings(base[orig.wsi_id], mod, tile_flags[orig.wsi_id])
        grid = tuple(meta.grid_pos for meta in mod.metas())
        out.append(
            EmbeddedWsi(
                wsi_id=mod.wsi_id, label=mod.label, split=mod.split,
                embeddings=emb, grid_pos=grid,
            )
        )
    return out


def run_condition(
    dataset: list[Wsi],
    spec: SweepSpec,
    p: float,
    base_features: dict[str, np.ndarray] | None = None,
) -> ConditionResult:
    """Train and evaluate one grid point; failures come back flagged, not raised."""
    spec.validate()
    if not any(np.isclose(p, g) for g in spec.p_grid):
        raise ValueError(f"p={p} is not on the sweep grid {spec.p_grid}")
    train_seed, test_seed, model_seed = spec.seeds_for(p)
    started = time.perf_counter()
    try:
        result = _run_condition_inner(
            dataset, spec, p, train_seed, test_seed, model_seed, base_features
        )
        wall = time.perf_counter() - started
        result.record = dataclasses.replace(result.record, wall_time=wall)
        return result
    except Exception as exc:  # noqa: BLE001 - a failed condition must not kill the sweep
        record = RunRecord(
            spec_hash=spec.spec_hash(), design=spec.design, modifier=spec.modifier,
            p=p, train_plan_seed=train_seed, test_plan_seed=test_seed,
            model_seed=model_seed, checkpoint=None, auc=None, cr=None, ncc=None,
            sbar_size=None, ncc_excluded=None,
            wall_time=time.perf_counter() - started,
            failed=True, error=f"{type(exc).__name__}: {exc}",
        )
        return ConditionResult(record=record)


def _run_condition_inner(
    dataset: list[Wsi],
    spec: SweepSpec,
    p: float,
    train_seed: int,
    test_seed: int,
    model_seed: int,
    base_features: dict[str, np.ndarray] | None,
) -> ConditionResult:
    trainval = [w for w in dataset if w.split in ("train", "val")]
    test = [w for w in dataset if w.split == "test"]
    if not trainval or not test:
        raise ValueError("dataset must contain train/val and test WSIs")
    if base_features is None:
        base_features = clean_features(dataset)

    train_plan = sample_plan(trainval, spec.modifier, spec.design, p, train_seed)
    applied_trainval = apply_plan(trainval, train_plan)
    embedded = _embed_applied(trainval, applied_trainval, train_plan.tile_flags, base_features)
    cfg = dataclasses.replace(spec.model_cfg, seed=model_seed)
    model, _ = abmil.train(embedded, cfg)

    # Fresh plan for the held-out split: same p, independent realization.
    test_plan = sample_plan(test, spec.modifier, spec.design, p, test_seed)
    applied_test = apply_plan(test, test_plan)
    embedded_test = _embed_applied(test, applied_test, test_plan.tile_flags, base_features)

    evals: list[PairedEval] = []
    labels: dict[str, int] = {}
    probs_pos: list[float] = []
    probs_neg: list[float] = []
    for orig, emb_mod in zip(test, embedded_test):
        emb_clean = EmbeddedWsi(
            wsi_id=orig.wsi_id, label=orig.label, split=orig.split,
            embeddings=base_features[orig.wsi_id], grid_pos=emb_mod.grid_pos,
        )
        pred_clean = abmil.predict_full(model, emb_clean)
        pred_mod = abmil.predict_full(model, emb_mod)
        evals.append(
            PairedEval(
                wsi_id=orig.wsi_id, pred_clean=pred_clean, pred_modified=pred_mod,
                modified_mask=test_plan.tile_flags[orig.wsi_id],
            )
        )
        labels[orig.wsi_id] = orig.label
        (probs_pos if orig.label == 1 else probs_neg).append(pred_mod.probability)

    auc_val = metrics.auc(probs_pos, probs_neg)
    report = metrics.build_report(evals)
    record = RunRecord(
        spec_hash=spec.spec_hash(), design=spec.design, modifier=spec.modifier,
        p=p, train_plan_seed=train_seed, test_plan_seed=test_seed,
        model_seed=model_seed, checkpoint=None, auc=auc_val,
        cr=report.cr, ncc=report.ncc, sbar_size=report.sensitive_count,
        ncc_excluded=report.ncc_excluded, wall_time=0.0,
    )
    return ConditionResult(record=record, model=model, report=report, evals=evals, labels=labels)


def render_attention_heatmap(
    attention: AttentionMap,
    grid_shape: tuple[int, int],
    modified_mask: np.ndarray | None = None,
    cell_size: int = HEATMAP_CELL,
) -> np.ndarray:
    """Rasterize attention onto the tile grid.

    Each tile becomes a cell_size x cell_size block whose gray level is its
    weight divided by the maximum weight, so the strongest tile is always
    white.  Grid cells with no tile stay black.  With a mask, the image gains
    an RGB outline around every modified tile's cell.
    """
    rows, cols = int(grid_shape[0]), int(grid_shape[1])
    if rows < 1 or cols < 1:
        raise GridMismatch(f"grid shape must be positive, got {grid_shape}")
    if cell_size < 1:
        raise ValueError(f"cell_size must be >= 1, got {cell_size}")
    if attention.grid_pos is None:
        raise GridMismatch("attention map carries no grid positions")
    if modified_mask is not None:
        modified_mask = np.asarray(modified_mask, dtype=bool)
        if modified_mask.shape != attention.weights.shape:
            raise GridMismatch("modified mask length must match the tile count")

    seen: set[tuple[int, int]] = set()
    for pos in attention.grid_pos:
        r, c = int(pos[0]), int(pos[1])
        if not (0 <= r < rows and 0 <= c < cols):
            raise GridMismatch(f"tile at {pos} falls outside a {rows}x{cols} grid")
        if (r, c) in seen:
            raise GridMismatch(f"two tiles share grid cell {pos}")
        seen.add((r, c))

    peak = float(attention.weights.max())
    levels = np.round(255.0 * attention.weights / peak).astype(np.uint8)
    canvas = np.zeros((rows, cols), dtype=np.uint8)
    for (r, c), level in zip(attention.grid_pos, levels):
        canvas[int(r), int(c)] = level
    image = np.repeat(np.repeat(canvas, cell_size, axis=0), cell_size, axis=1)
    if modified_mask is None:
        return image

    rgb = np.stack([image] * 3, axis=-1)
    for pos, flagged in zip(attention.grid_pos, modified_mask):
        if not flagged:
            continue
        r0, c0 = int(pos[0]) * cell_size, int(pos[1]) * cell_size
        r1, c1 = r0 + cell_size, c0 + cell_size
        rgb[r0, c0:c1] = OUTLINE_COLOR
        rgb[r1 - 1, c0:c1] = OUTLINE_COLOR
        rgb[r0:r1, c0] = OUTLINE_COLOR
        rgb[r0:r1, c1 - 1] = OUTLINE_COLOR
    return rgb


def _grid_shape_of(grid_pos: tuple[tuple[int, int], ...]) -> tuple[int, int]:
    rows = max(int(p[0]) for p in grid_pos) + 1
    cols = max(int(p[1]) for p in grid_pos) + 1
    return rows, cols


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _write_record(record: RunRecord, path: Path) -> None:
    blob = json.dumps(record.to_json_dict(), indent=2, sort_keys=True) + "\n"
    _atomic_write(path, blob.encode("utf-8"))


def _metrics_csv(result: ConditionResult) -> str:
    lines = [",".join(METRICS_COLUMNS)]
    report = result.report
    assert report is not None
    for row in report.per_wsi:
        corr = row["attention_correlation"]
        lines.append(
            ",".join(
                [
                    row["wsi_id"],
                    str(result.labels[row["wsi_id"]]),
                    _fmt(row["prob_clean"]),
                    _fmt(row["prob_modified"]),
                    "1" if row["flipped"] else "0",
                    _fmt(row["prevalence"]),
                    _fmt(row["precision_at_top"]),
                    "" if corr is None else _fmt(corr),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def persist_condition(result: ConditionResult, cond_dir: Path) -> RunRecord:
    """Write record/checkpoint/metrics/heatmaps; returns the final record."""
    cond_dir.mkdir(parents=True, exist_ok=True)
    record = result.record
    if not record.failed:
        assert result.model is not None
        abmil.save_model(result.model, cond_dir / "model.ckpt")
        record = dataclasses.replace(record, checkpoint="model.ckpt")
        _atomic_write(cond_dir / "metrics.csv", _metrics_csv(result).encode("utf-8"))
        heat_dir = cond_dir / "heatmaps"
        heat_dir.mkdir(exist_ok=True)
        for ev in result.evals:
            attn = ev.pred_modified.attention
            if attn.grid_pos is None:
                continue
            image = render_attention_heatmap(
                attn, _grid_shape_of(attn.grid_pos), modified_mask=ev.modified_mask
            )
            Image.fromarray(image).save(heat_dir / f"{ev.wsi_id}.png")
    _write_record(record, cond_dir / "record.json")
    return record


def _summary_csv(records: list[RunRecord]) -> str:
    lines = [",".join(SUMMARY_COLUMNS)]
    for rec in records:
        cells = [rec.design.value, rec.modifier.value, _fmt(rec.p)]
        if rec.failed:
            cells += ["", "", "", ""]
        else:
            cells += [_fmt(rec.auc), _fmt(rec.cr), _fmt(rec.ncc), str(rec.sbar_size)]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def _summary_plot(records: list[RunRecord], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ok = [r for r in records if not r.failed]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5), constrained_layout=True)
    panels = [("AUC", [r.auc for r in ok]), ("CR", [r.cr for r in ok]), ("NCC", [r.ncc for r in ok])]
    xs = [r.p for r in ok]
    for ax, (name, ys) in zip(axes, panels):
        ax.plot(xs, ys, marker="o")
        ax.set_xlabel("p")
        ax.set_ylabel(name)
        ax.set_xlim(-0.05, 1.05)
        ax.grid(True, alpha=0.3)
    if ok:
        title = f"{ok[0].design.value} / {ok[0].modifier.value}"
        fig.suptitle(title)
    fig.savefig(path, dpi=110)
    plt.close(fig)


_WORKER_STATE: dict = {}


def _pool_init(dataset: list[Wsi], base: dict[str, np.ndarray]) -> None:
    _WORKER_STATE["dataset"] = dataset
    _WORKER_STATE["base"] = base


def _pool_run(args: tuple[SweepSpec, float]) -> ConditionResult:
    spec, p = args
    return run_condition(_WORKER_STATE["dataset"], spec, p, _WORKER_STATE["base"])


def run_sweep(
    dataset: list[Wsi],
    spec: SweepSpec,
    out_root: str | Path = "runs",
    jobs: int = 1,
) -> list[RunRecord]:
    """Run every grid point, persist condition artifacts plus a summary.

    Conditions are independent: one failing is recorded and skipped in the
    summary metrics, not fatal.  With jobs > 1 they run in worker processes;
    each condition stays single-threaded either way, so results do not
    depend on jobs.
    """
    spec.validate()
    if jobs < 1:
        raise ValueError(f"jobs must be >= 1, got {jobs}")
    sweep_dir = Path(out_root) / spec.spec_hash()
    sweep_dir.mkdir(parents=True, exist_ok=True)
    spec_blob = json.dumps(spec.to_json_dict(), indent=2, sort_keys=True) + "\n"
    _atomic_write(sweep_dir / "spec.json", spec_blob.encode("utf-8"))

    base = clean_features(dataset)
    if jobs == 1 or len(spec.p_grid) == 1:
        results = [run_condition(dataset, spec, p, base) for p in spec.p_grid]
    else:
        with concurrent.futures.ProcessPoolExecutor(
            max_workers=min(jobs, len(spec.p_grid)),
            initializer=_pool_init,
            initargs=(dataset, base),
        ) as pool:
            results = list(pool.map(_pool_run, [(spec, p) for p in spec.p_grid]))

    records = []
    for p, result in zip(spec.p_grid, results):
        records.append(persist_condition(result, sweep_dir / spec.condition_name(p)))
    write_summary(records, sweep_dir)
    return records


def write_summary(records: list[RunRecord], sweep_dir: Path) -> None:
    records = sorted(records, key=lambda r: (r.design.value, r.modifier.value, r.p))
    _atomic_write(sweep_dir / "summary.csv", _summary_csv(records).encode("utf-8"))
    _summary_plot(records, sweep_dir / "summary.png")


def load_records(sweep_dir: str | Path) -> list[RunRecord]:
    """Collect the per-condition records under one sweep directory."""
    sweep_dir = Path(sweep_dir)
    records = []
    for path in sorted(sweep_dir.glob("*/record.json")):
        records.append(RunRecord.from_json_dict(json.loads(path.read_text())))
    if not records:
        raise FileNotFoundError(f"no condition records under {sweep_dir}")
    return records


def regenerate_report(sweep_dir: str | Path) -> list[RunRecord]:
    """Rebuild summary.csv and summary.png from persisted records alone."""
    sweep_dir = Path(sweep_dir)
    records = load_records(sweep_dir)
    write_summary(records, sweep_dir)
    return records
