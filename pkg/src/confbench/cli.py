"""Command line front end: gen, embed, train, sweep, ablate, report.

Every subcommand resolves its configuration from three layers (dataclass
defaults, then an optional JSON config file, then explicit flags, later
layers winning), prints the resolved result together with the root seed,
and only then does any work.  Exit codes: 0 success, 1 runtime failure,
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import abmil, core, experiment, features, synthgen
from .ablation import AblationConfig, run_ablation_study
from .abmil import AbmilConfig, EmbeddedWsi
from .core import ConfbenchError
from .experiment import SweepSpec, run_sweep
from .modify import Design, Modifier
from .synthgen import GenConfig

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

RESULTS_ENV = "CB_RESULTS_DIR"
EMBED_INDEX = "index.json"


@dataclass(frozen=True)
class CliConfig:
    """One parsed invocation: subcommand, config file, and flag overrides."""

    command: str
    config_file: str | None
    overrides: dict
    resolved: dict


def _results_root(explicit: str | None) -> Path:
    if explicit:
        return Path(explicit)
    return Path(os.environ.get(RESULTS_ENV, "runs"))


def _flag_name(field: str) -> str:
    return "--" + field.replace("_", "-")


class UsageError(ValueError):
    """Configuration problem; the message should point at the culprit flag.

    Subclasses ValueError so argparse type converters that raise it are
    reported by argparse itself (exit 2, flag named).
    """


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path} [--config]") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc} [--config]") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a JSON object [--config]")
    return data


def _coerce_like(default, value):
    """JSON gives lists; dataclass fields with tuple defaults expect tuples."""
    if isinstance(default, tuple) and isinstance(value, (list, tuple)):
        return tuple(value)
    return value


def _build_config(cls, file_values: dict, flag_values: dict, aliases: dict | None = None):
    """Defaults <- config file <- explicit flags, with unknown-key checking."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(file_values) - set(fields)
    if unknown:
        raise UsageError(
            f"unknown {cls.__name__} key(s) in config file: {', '.join(sorted(unknown))} [--config]"
        )
    defaults = cls()
    merged = {}
    for name in fields:
        value = getattr(defaults, name)
        if name in file_values:
            value = _coerce_like(getattr(defaults, name), file_values[name])
        if flag_values.get(name) is not None:
            value = flag_values[name]
        merged[name] = value
    try:
        cfg = cls(**merged)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(_hint_flag(str(exc), fields, aliases or {})) from exc
    return cfg


def _hint_flag(message: str, fields, aliases: dict) -> str:
    for name in fields:
        if name in message:
            return f"{message} [{aliases.get(name, _flag_name(name))}]"
    return message


def _announce(command: str, resolved: dict) -> None:
    print(json.dumps({"command": command, **resolved}, indent=2, sort_keys=True))


def _parse_floats(text: str, flag: str) -> tuple[float, ...]:
    try:
        return tuple(float(tok) for tok in text.split(",") if tok.strip() != "")
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r} [{flag}]") from exc


def _parse_ints(text: str, flag: str) -> tuple[int, ...]:
    try:
        return tuple(int(tok) for tok in text.split(",") if tok.strip() != "")
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r} [{flag}]") from exc


def _load_dataset(path: str) -> list[core.Wsi]:
    try:
        return core.load_dataset(path)
    except (FileNotFoundError, NotADirectoryError) as exc:
        raise UsageError(f"dataset not found at {path} [--data]") from exc
    except core.FormatError as exc:
        raise UsageError(f"dataset at {path} is unreadable: {exc} [--data]") from exc


# ---------------------------------------------------------------------------
# Embedding store directory (one row-matrix file per WSI plus an index)
# ---------------------------------------------------------------------------


def save_embedded_dataset(wsis: list[core.Wsi], out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = {}
    for wsi in wsis:
        name = f"{wsi.wsi_id}.emb"
        features.write_embedding_store(out_dir / name, features.extract_wsi(wsi))
        index[wsi.wsi_id] = {
            "label": wsi.label,
            "split": wsi.split,
            "file": name,
            "grid_pos": [list(m.grid_pos) for m in wsi.metas()],
        }
    blob = json.dumps(index, indent=2, sort_keys=True) + "\n"
    (out_dir / EMBED_INDEX).write_text(blob)
    return out_dir


def load_embedded_dataset(in_dir: str | Path) -> list[EmbeddedWsi]:
    in_dir = Path(in_dir)
    index_path = in_dir / EMBED_INDEX
    if not index_path.exists():
        raise UsageError(f"no {EMBED_INDEX} under {in_dir} [--embeddings]")
    index = json.loads(index_path.read_text())
    out = []
    for wsi_id in sorted(index):
        entry = index[wsi_id]
        matrix = features.read_embedding_store(in_dir / entry["file"]).astype(np.float64)
        out.append(
            EmbeddedWsi(
                wsi_id=wsi_id,
                label=int(entry["label"]),
                split=entry["split"],
                embeddings=matrix,
                grid_pos=tuple((int(r), int(c)) for r, c in entry["grid_pos"]),
            )
        )
    return out


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_gen(args: argparse.Namespace) -> int:
    file_values = _load_config_file(args.config)
    flags = {
        "num_wsis": args.num_wsis,
        "pos_fraction": args.pos_fraction,
        "tiles_per_wsi_range": args.tiles_per_wsi,
        "n": args.n,
        "seed": args.seed,
    }
    cfg = _build_config(GenConfig, file_values, flags)
    resolved = {"config": dataclasses.asdict(cfg), "root_seed": cfg.seed, "out": str(args.out)}
    _announce("gen", resolved)
    if args.print_config:
        return EXIT_OK
    wsis = synthgen.generate_dataset(cfg)
    core.save_dataset(wsis, args.out)
    labels = [w.label for w in wsis]
    print(f"wrote {len(wsis)} WSIs ({sum(labels)} positive) to {args.out}")
    return EXIT_OK


def _cmd_embed(args: argparse.Namespace) -> int:
    resolved = {"config": {"data": str(args.data), "out": str(args.out)}, "root_seed": args.seed}
    _announce("embed", resolved)
    if args.print_config:
        return EXIT_OK
    wsis = _load_dataset(args.data)
    save_embedded_dataset(wsis, args.out)
    dim = features.FEATURE_DIM
    print(f"embedded {len(wsis)} WSIs at {dim} features/tile into {args.out}")
    return EXIT_OK


def _model_flags(args: argparse.Namespace) -> dict:
    return {
        "layer_widths": args.layer_widths,
        "attention_dim": args.attention_dim,
        "gated": args.gated,
        "dropout": args.dropout,
        "label_smoothing": args.label_smoothing,
        "lr": args.lr,
        "bag_size": args.bag_size,
        "bags_per_batch": args.bags_per_batch,
        "max_epochs": args.max_epochs,
    }


def _cmd_train(args: argparse.Namespace) -> int:
    if (args.data is None) == (args.embeddings is None):
        raise UsageError("exactly one of --data and --embeddings is required [--data]")
    file_values = _load_config_file(args.config)
    flags = _model_flags(args)
    flags["seed"] = args.seed
    cfg = _build_config(AbmilConfig, file_values, flags)
    resolved = {
        "config": dataclasses.asdict(cfg),
        "root_seed": cfg.seed,
        "data": args.data,
        "embeddings": args.embeddings,
        "out": str(args.out),
    }
    _announce("train", resolved)
    if args.print_config:
        return EXIT_OK
    if args.embeddings is not None:
        embedded = load_embedded_dataset(args.embeddings)
    else:
        wsis = _load_dataset(args.data)
        embedded = [
            EmbeddedWsi(
                wsi_id=w.wsi_id, label=w.label, split=w.split,
                embeddings=features.extract_wsi(w),
                grid_pos=tuple(m.grid_pos for m in w.metas()),
            )
            for w in wsis
        ]
    model, log = abmil.train(embedded, cfg)
    abmil.save_model(model, args.out)
    if log:
        best = min(log, key=lambda e: e.val_loss)
        print(f"trained {len(log)} epochs; best val loss {best.val_loss:.6f} at epoch {best.epoch}")
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def _resolve_sweep_spec(args: argparse.Namespace) -> SweepSpec:
    file_values = _load_config_file(args.config)
    unknown = set(file_values) - {"design", "modifier", "p_grid", "model_cfg", "root_seed"}
    if unknown:
        raise UsageError(
            f"unknown SweepSpec key(s) in config file: {', '.join(sorted(unknown))} [--config]"
        )
    model_cfg = _build_config(AbmilConfig, file_values.get("model_cfg", {}), _model_flags(args))

    design = args.design if args.design is not None else file_values.get("design")
    modifier = args.modifier if args.modifier is not None else file_values.get("modifier")
    if design is None:
        raise UsageError("a planting design is required [--design]")
    if modifier is None:
        raise UsageError("a modifier is required [--modifier]")
    p_grid = args.p_grid
    if p_grid is None:
        p_grid = tuple(file_values.get("p_grid", experiment.DEFAULT_P_GRID))
    root_seed = args.seed if args.seed is not None else file_values.get("root_seed", 0)
    try:
        spec = SweepSpec(
            design=Design(design), modifier=Modifier(modifier),
            p_grid=p_grid, model_cfg=model_cfg, root_seed=root_seed,
        )
        spec.validate()
    except ValueError as exc:
        msg = str(exc)
        for token, flag in (("design", "--design"), ("modifier", "--modifier"), ("p_grid", "--p-grid")):
            if token in msg:
                msg = f"{msg} [{flag}]"
                break
        raise UsageError(msg) from exc
    return spec


def _cmd_sweep(args: argparse.Namespace) -> int:
    spec = _resolve_sweep_spec(args)
    out_root = _results_root(args.out)
    resolved = {
        "config": spec.to_json_dict(),
        "root_seed": spec.root_seed,
        "data": str(args.data),
        "out_root": str(out_root),
        "jobs": args.jobs,
        "spec_hash": spec.spec_hash(),
    }
    _announce("sweep", resolved)
    if args.print_config:
        return EXIT_OK
    if args.jobs < 1:
        raise UsageError(f"jobs must be >= 1, got {args.jobs} [--jobs]")
    wsis = _load_dataset(args.data)
    records = run_sweep(wsis, spec, out_root=out_root, jobs=args.jobs)
    for rec in records:
        if rec.failed:
            print(f"p={rec.p:g}: FAILED ({rec.error})")
        else:
            print(
                f"p={rec.p:g}: auc={rec.auc:.4f} cr={rec.cr:.4f} "
                f"ncc={rec.ncc:.4f} sbar={rec.sbar_size}"
            )
    sweep_dir = out_root / spec.spec_hash()
    print(f"summary written to {sweep_dir / 'summary.csv'}")
    if any(rec.failed for rec in records):
        return EXIT_RUNTIME
    return EXIT_OK


def _cmd_ablate(args: argparse.Namespace) -> int:
    file_values = _load_config_file(args.config)
    model_values = file_values.pop("model_cfg", {})
    flags = {
        "removal_ratios": args.ratios,
        "baseline_replicates": args.replicates,
        "grid_size": args.grid_size,
        "seed": args.seed,
    }
    cfg = _build_config(
        AblationConfig, file_values, flags,
        aliases={"removal_ratios": "--ratios", "baseline_replicates": "--replicates"},
    )
    model_cfg = _build_config(AbmilConfig, model_values, _model_flags(args))
    out_dir = Path(args.out) if args.out else _results_root(None) / "ablation"
    resolved = {
        "config": dataclasses.asdict(cfg),
        "model_cfg": dataclasses.asdict(model_cfg),
        "root_seed": cfg.seed,
        "data": str(args.data),
        "out": str(out_dir),
    }
    _announce("ablate", resolved)
    if args.print_config:
        return EXIT_OK
    wsis = _load_dataset(args.data)
    result = run_ablation_study(wsis, cfg, model_cfg, out_dir)
    print(f"selected threshold: {result.threshold:.6g}")
    for row in result.rows:
        print(
            f"ratio={row.ratio:g}: feature auc={row.auc_feature:.4f} "
            f"baseline mean={row.auc_baseline_mean:.4f}"
        )
    print(f"curve written to {result.curve_path}")
    print(f"results written to {result.results_path}")
    return EXIT_OK


def _cmd_report(args: argparse.Namespace) -> int:
    resolved = {"config": {"run": str(args.run)}, "root_seed": args.seed}
    _announce("report", resolved)
    if args.print_config:
        return EXIT_OK
    try:
        records = experiment.regenerate_report(args.run)
    except FileNotFoundError as exc:
        raise UsageError(f"{exc} [--run]") from exc
    print(f"rebuilt summary for {len(records)} condition(s) under {args.run}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON config file; explicit flags override it")
    sub.add_argument("--seed", type=int, default=None, help="root seed for this run")
    sub.add_argument(
        "--print-config", action="store_true",
        help="print the resolved configuration as JSON and exit",
    )


def _add_model_flags(sub: argparse.ArgumentParser) -> None:
    group = sub.add_argument_group("model")
    group.add_argument("--layer-widths", type=lambda s: _parse_ints(s, "--layer-widths"),
                       default=None, metavar="W1,W2,...")
    group.add_argument("--attention-dim", type=int, default=None)
    group.add_argument("--gated", action=argparse.BooleanOptionalAction, default=None)
    group.add_argument("--dropout", type=float, default=None)
    group.add_argument("--label-smoothing", type=float, default=None)
    group.add_argument("--lr", type=float, default=None)
    group.add_argument("--bag-size", type=int, default=None)
    group.add_argument("--bags-per-batch", type=int, default=None)
    group.add_argument("--max-epochs", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="confbench",
        description="Synthetic confounder benchmark: data, models, sweeps, ablations.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    gen = subs.add_parser("gen", help="generate and persist a synthetic dataset")
    gen.add_argument("--out", required=True, help="output dataset directory")
    gen.add_argument("--num-wsis", type=int, default=None)
    gen.add_argument("--pos-fraction", type=float, default=None)
    gen.add_argument("--tiles-per-wsi", type=lambda s: _parse_ints(s, "--tiles-per-wsi"),
                     default=None, metavar="LO,HI")
    gen.add_argument("--n", type=int, default=None, help="tile side in pixels")
    _add_common(gen)
    gen.set_defaults(func=_cmd_gen)

    embed = subs.add_parser("embed", help="extract tile embeddings to a store")
    embed.add_argument("--data", required=True, help="dataset directory from gen")
    embed.add_argument("--out", required=True, help="embedding store directory")
    _add_common(embed)
    embed.set_defaults(func=_cmd_embed)

    train = subs.add_parser("train", help="train an attention-MIL model")
    train.add_argument("--data", default=None, help="dataset directory (embeds on the fly)")
    train.add_argument("--embeddings", default=None, help="embedding store from embed")
    train.add_argument("--out", required=True, help="checkpoint path")
    _add_model_flags(train)
    _add_common(train)
    train.set_defaults(func=_cmd_train)

    sweep = subs.add_parser("sweep", help="run a confounder sweep over a p grid")
    sweep.add_argument("--data", required=True, help="dataset directory from gen")
    sweep.add_argument("--design", choices=[d.value for d in Design], default=None)
    sweep.add_argument(
        "--modifier", choices=[m.value for m in Modifier if m is not Modifier.NONE], default=None
    )
    sweep.add_argument("--p-grid", type=lambda s: _parse_floats(s, "--p-grid"),
                       default=None, metavar="P1,P2,...")
    sweep.add_argument("--out", default=None,
                       help=f"results root (default ${RESULTS_ENV} or ./runs)")
    sweep.add_argument("--jobs", type=int, default=1, help="max parallel conditions")
    _add_model_flags(sweep)
    _add_common(sweep)
    sweep.set_defaults(func=_cmd_sweep)

    ablate = subs.add_parser("ablate", help="threshold search plus feature-based ablation")
    ablate.add_argument("--data", required=True, help="dataset directory from gen")
    ablate.add_argument("--ratios", type=lambda s: _parse_floats(s, "--ratios"),
                        default=None, metavar="R1,R2,...")
    ablate.add_argument("--replicates", type=int, default=None)
    ablate.add_argument("--grid-size", type=int, default=None)
    ablate.add_argument("--out", default=None, help="output directory for the CSVs")
    _add_model_flags(ablate)
    _add_common(ablate)
    ablate.set_defaults(func=_cmd_ablate)

    report = subs.add_parser("report", help="re-render summary CSV/plots from records")
    report.add_argument("--run", required=True, help="sweep directory (runs/<hash>)")
    _add_common(report)
    report.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfbenchError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
