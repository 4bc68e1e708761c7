"""Command-line surface: synthesize data, train, evaluate, run ablations,
and export per-window graphs for inspection.

Exit codes: 0 success, 2 input/usage error, 3 numerical failure.  Every
command writes a resolved-config snapshot next to its outputs.  Heavy
imports happen inside the command handlers so that --threads can pin the
BLAS pools before numpy loads.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

__version__ = "0.1.0"

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bysgnn",
        description="Hourly POI visit forecasting over dynamic busyness graphs")
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS/OpenMP threads (default: env BYSGNN_THREADS or 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", help="key=value spec file (defaults used when omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true",
                   help="write into a non-empty output directory")

    p = sub.add_parser("train", help="train a forecaster")
    _add_data_arg(p)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key=value overrides for train/model config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float, dest="lr0")
    p.add_argument("--seed", type=int)
    p.add_argument("--loss-kind", choices=("mae", "mse"), dest="loss_kind")
    p.add_argument("--ablate", action="append", default=None,
                   help="ablation flag (repeatable or comma-separated)")
    p.add_argument("--embeddings", help="precomputed node embedding CSV")
    p.add_argument("--distances", help="precomputed POI distance matrix CSV")
    p.add_argument("--region", help="region name used in description sentences")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint against baselines")
    p.add_argument("--checkpoint", required=True)
    _add_data_arg(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="train and compare ablation variants")
    _add_data_arg(p)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", default=None,
                   help="comma list of ablation flags (default: all five)")
    p.add_argument("--seeds", default="0,1,2", help="comma list of seeds")
    p.add_argument("--config", help="key=value overrides for train/model config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("inspect-graph", help="export the graph built for one window")
    p.add_argument("--checkpoint", required=True)
    _add_data_arg(p)
    p.add_argument("--timestamp", required=True,
                   help="ISO-8601 hour; the input window ends at this hour")
    p.add_argument("--out", required=True)
    return parser


def _add_data_arg(p):
    p.add_argument("--data", required=True,
                   help="directory containing visits.csv and metadata.csv")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _pin_threads(argv)
    parser = build_parser()
    args = parser.parse_args(argv)

    from .errors import (BysgnnError, ConfigurationError, DivergenceError,
                         NonFiniteError, ParseError, SchemaError)
    handlers = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
                "ablate": cmd_ablate, "inspect-graph": cmd_inspect_graph}
    try:
        return handlers[args.command](args)
    except (DivergenceError, NonFiniteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParseError, SchemaError, ConfigurationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except BysgnnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def _pin_threads(argv) -> None:
    """Resolve --threads / BYSGNN_THREADS and pin pools before numpy loads."""
    threads = os.environ.get("BYSGNN_THREADS")
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif arg.startswith("--threads="):
            threads = arg.split("=", 1)[1]
    try:
        count = max(1, int(threads)) if threads is not None else 1
    except ValueError:
        count = 1
    from .runtime import set_thread_env
    set_thread_env(count)


def _resolved_threads(args) -> int:
    env = os.environ.get("BYSGNN_THREADS")
    if args.threads is not None:
        return max(1, args.threads)
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError:
            return 1
    return 1


def _prepare_out_dir(path, force: bool = True) -> Path:
    out = Path(path)
    if out.exists() and not force and any(out.iterdir()):
        from .errors import ConfigurationError
        raise ConfigurationError(
            f"output directory {out} is not empty; pass --force to write anyway")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_snapshot(out_dir: Path, payload: dict) -> None:
    payload = dict(payload)
    payload["package_version"] = __version__
    (out_dir / "config_snapshot.json").write_text(
        json.dumps(payload, sort_keys=True, indent=1) + "\n")


def _load_dataset(data_dir):
    from .data import load_metadata_csv, load_visits_csv
    data_dir = Path(data_dir)
    visits_path = data_dir / "visits.csv"
    metadata_path = data_dir / "metadata.csv"
    for p in (visits_path, metadata_path):
        if not p.exists():
            raise FileNotFoundError(f"missing input file: {p}")
    ds, report = load_visits_csv(visits_path)
    metadata = load_metadata_csv(metadata_path)
    return ds, metadata, report


def _parse_config_file(path) -> dict:
    """key=value lines for TrainConfig / ModelConfig fields."""
    from .errors import ConfigurationError, ParseError
    from .model import ModelConfig
    from .training import TrainConfig

    types = {}
    for dc in (TrainConfig, ModelConfig):
        for f in dataclasses.fields(dc):
            types[f.name] = f
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ParseError(f"{path} line {lineno}: expected key=value")
        key, _, raw = text.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in types:
            raise ConfigurationError(
                f"{path} line {lineno}: unknown config key {key!r}")
        values[key] = _coerce_config_value(key, raw)
    return values


def _coerce_config_value(key: str, raw: str):
    if key == "ablations":
        return tuple(v for v in raw.split(",") if v)
    if key == "split":
        return tuple(float(v) for v in raw.split(","))
    if key == "loss_kind":
        return raw
    if key in ("lr0", "decay_factor", "rho", "eps", "amp_power", "edge_keep_threshold"):
        return float(raw)
    return int(raw)


def _build_configs(args, file_values: dict):
    from .model import ModelConfig
    from .training import TrainConfig

    train_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    model_fields = {f.name for f in dataclasses.fields(ModelConfig)}
    train_kwargs = {k: v for k, v in file_values.items() if k in train_fields}
    model_kwargs = {k: v for k, v in file_values.items() if k in model_fields}
    for name in ("epochs", "batch_size", "lr0", "seed", "loss_kind"):
        value = getattr(args, name, None)
        if value is not None:
            train_kwargs[name] = value
    ablate = getattr(args, "ablate", None)
    if ablate:
        flags = []
        for chunk in ablate:
            flags.extend(v for v in chunk.split(",") if v)
        train_kwargs["ablations"] = tuple(flags)
    return TrainConfig(**train_kwargs), ModelConfig(**model_kwargs)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .data import (SynthSpec, format_synth_spec, generate_synthetic,
                       parse_synth_spec, write_metadata_csv, write_visits_csv)

    spec = parse_synth_spec(args.spec) if args.spec else SynthSpec()
    spec.validate()
    out = _prepare_out_dir(args.out, force=args.force)
    ds, metadata = generate_synthetic(spec, seed=args.seed)
    write_visits_csv(out / "visits.csv", ds)
    write_metadata_csv(out / "metadata.csv", metadata)
    (out / "synth_spec.txt").write_text(format_synth_spec(spec))
    _write_snapshot(out, {"command": "synth", "seed": args.seed,
                          "threads": _resolved_threads(args),
                          "spec": dataclasses.asdict(spec)})
    print(f"wrote {ds.n_pois} POIs x {ds.n_hours} hours to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .runtime import enable_fast_allocator
    from .training import train

    enable_fast_allocator()
    ds, metadata, load_report = _load_dataset(args.data)
    file_values = _parse_config_file(args.config) if args.config else {}
    train_cfg, model_cfg = _build_configs(args, file_values)
    out = _prepare_out_dir(args.out)
    _write_snapshot(out, {
        "command": "train", "data": str(args.data),
        "threads": _resolved_threads(args),
        "train_config": dataclasses.asdict(train_cfg),
        "model_config": dataclasses.asdict(model_cfg),
        "missing_hours_filled": load_report.missing_count,
        "embeddings": args.embeddings, "distances": args.distances,
        "region": args.region})

    progress = None
    if not args.quiet:
        def progress(row):
            val = "" if row["val_mae"] is None else f" val_mae={row['val_mae']:.4f}"
            print(f"epoch {row['epoch']:3d}  lr={row['lr']:.2e}  "
                  f"train_loss={row['train_loss']:.4f}{val}", flush=True)

    result = train(ds, metadata, model_cfg, train_cfg, out_dir=out,
                   embeddings_path=args.embeddings, distances_path=args.distances,
                   region=args.region, progress=progress)
    print(f"best epoch {result.best_epoch}; checkpoint at {result.checkpoint_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .errors import ConfigurationError
    from .evaluation import (evaluate_checkpoint, format_evaluation_table,
                             write_evaluation_csv)
    from .runtime import enable_fast_allocator
    from .training import load_checkpoint

    enable_fast_allocator()
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise FileNotFoundError(f"missing checkpoint: {ckpt_path}")
    checkpoint = load_checkpoint(ckpt_path)
    ds, _, _ = _load_dataset(args.data)
    if list(ds.poi_ids) != list(checkpoint.poi_ids):
        missing = sorted(set(checkpoint.poi_ids) - set(ds.poi_ids))
        extra = sorted(set(ds.poi_ids) - set(checkpoint.poi_ids))
        raise ConfigurationError(
            "dataset poi_ids do not match checkpoint; "
            f"missing={missing[:10]} extra={extra[:10]}"
            + ("" if missing or extra else " (ordering differs)"))
    out = _prepare_out_dir(args.out)
    result = evaluate_checkpoint(checkpoint, ds)
    write_evaluation_csv(out / "metrics_report.csv", result)
    table = format_evaluation_table(result)
    (out / "metrics_report.txt").write_text(table)
    _write_snapshot(out, {"command": "eval", "checkpoint": str(ckpt_path),
                          "data": str(args.data),
                          "threads": _resolved_threads(args),
                          "n_test_windows": result.n_test_windows})
    print(table, end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .evaluation import (format_ablation_table, run_ablation,
                             write_ablation_csv)
    from .model import ABLATIONS
    from .runtime import enable_fast_allocator

    enable_fast_allocator()
    ds, metadata, _ = _load_dataset(args.data)
    file_values = _parse_config_file(args.config) if args.config else {}
    train_cfg, model_cfg = _build_configs(args, file_values)
    variants = (list(ABLATIONS) if args.variants is None
                else [v for v in args.variants.split(",") if v])
    seeds = [int(s) for s in args.seeds.split(",") if s]
    out = _prepare_out_dir(args.out)
    _write_snapshot(out, {
        "command": "ablate", "data": str(args.data),
        "threads": _resolved_threads(args), "variants": variants, "seeds": seeds,
        "train_config": dataclasses.asdict(train_cfg),
        "model_config": dataclasses.asdict(model_cfg)})

    progress = None
    if not args.quiet:
        def progress(variant, seed):
            print(f"training variant={variant} seed={seed}", flush=True)

    rows = run_ablation(ds, metadata, model_cfg, train_cfg, variants, seeds,
                        progress=progress)
    write_ablation_csv(out / "ablation_report.csv", rows)
    table = format_ablation_table(rows)
    (out / "ablation_report.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_inspect_graph(args) -> int:
    import numpy as np

    from .data import parse_timestamp, zscore_apply
    from .errors import ConfigurationError
    from .graphgen import write_labeled_matrix_csv
    from .runtime import enable_fast_allocator
    from .semantics import write_embeddings_csv
    from .training import load_checkpoint

    enable_fast_allocator()
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise FileNotFoundError(f"missing checkpoint: {ckpt_path}")
    checkpoint = load_checkpoint(ckpt_path)
    ds, _, _ = _load_dataset(args.data)
    model, inputs = checkpoint.build_model(ds)
    w = checkpoint.model_config.window

    ts = parse_timestamp(args.timestamp)
    end = ds.index_of(ts)  # raises ConfigurationError when outside the range
    if end < w - 1:
        raise ConfigurationError(
            f"timestamp {args.timestamp} has no full {w}-hour input window")
    norm = zscore_apply(inputs.augmented, checkpoint.stats)
    window = norm[:, end - w + 1:end + 1][None]  # (1, S, T)

    from . import autodiff as ad
    with ad.no_grad():
        _, capture = model.forward(window, capture=True)

    out = _prepare_out_dir(args.out)
    write_labeled_matrix_csv(out / "adjacency.csv", model.labels,
                             capture.adjacency[0])
    write_embeddings_csv(out / "embeddings.csv", model.labels,
                         capture.node_embeddings[0])
    alpha_text = "n/a (gate ablated)" if capture.alpha is None \
        else f"{capture.alpha:.10g}"
    (out / "gate_alpha.txt").write_text(alpha_text + "\n")
    _write_snapshot(out, {"command": "inspect-graph", "checkpoint": str(ckpt_path),
                          "data": str(args.data), "timestamp": args.timestamp,
                          "threads": _resolved_threads(args)})
    print(f"wrote adjacency.csv, embeddings.csv, gate_alpha.txt to {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
