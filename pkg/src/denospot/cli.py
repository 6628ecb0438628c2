"""Command-line orchestration: gen, train, is, eval.

Every subcommand resolves its settings in the same order: dataclass
defaults, then the JSON config file (sections "scene" and "train" with a
schema_version field), then environment overrides (DENOSPOT_SEED,
DENOSPOT_OUTPUT_DIR), then explicit flags. Malformed configs exit nonzero
with a diagnostic naming the offending field. All subcommands run
single-threaded and are deterministic under a fixed seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

from .decoder import load_checkpoint
from .synth import SceneSpec, rasterize, read_dataset, write_dataset
from .train import TrainConfig, evaluate_model, is_trace, train_run

SCHEMA_VERSION = 1
ENV_SEED = "DENOSPOT_SEED"
ENV_OUTPUT_DIR = "DENOSPOT_OUTPUT_DIR"


def _fail(message: str) -> None:
    print(f"error: {message}", file=sys.stderr)
    raise SystemExit(2)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        _fail(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        _fail(f"config file is not valid JSON: {exc}")
    if not isinstance(data, dict):
        _fail("config root must be a JSON object")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        _fail(f"schema_version: expected {SCHEMA_VERSION}, got {version!r}")
    return data


def _build(dc_type, section: dict, overrides: dict, where: str):
    merged = dict(section)
    seed_env = os.environ.get(ENV_SEED)
    if seed_env is not None and "seed" in {f.name for f in fields(dc_type)}:
        try:
            merged["seed"] = int(seed_env)
        except ValueError:
            _fail(f"{ENV_SEED} must be an integer, got {seed_env!r}")
    merged.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(dc_type)}
    for key in merged:
        if key not in known:
            _fail(f"{where}: unknown field {key!r}")
    try:
        return dc_type(**merged)
    except (TypeError, ValueError) as exc:
        _fail(f"{where}: {exc}")


def _resolve_out(flag_value: str | None, default_name: str) -> Path:
    if flag_value is not None:
        return Path(flag_value)
    base = os.environ.get(ENV_OUTPUT_DIR)
    return Path(base) / default_name if base else Path(default_name)


def _scene_overrides(args) -> dict:
    return {
        name: getattr(args, name)
        for name in (
            "alphabet_size",
            "min_instances",
            "max_instances",
            "min_transcript",
            "max_transcript",
            "inverse_fraction",
            "curvature_max",
            "grid",
            "seed",
        )
    }


def cmd_gen(args) -> int:
    config = _load_config(args.config)
    spec = _build(SceneSpec, config.get("scene", {}), _scene_overrides(args), "scene")
    out = _resolve_out(args.out, "dataset.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        counts = write_dataset(out, spec, args.images, start_index=args.start_index)
    except OSError as exc:
        _fail(f"cannot write dataset: {exc}")
    print(json.dumps({"path": str(out), **counts}, sort_keys=True))
    return 0


def _train_overrides(args) -> dict:
    names = [f.name for f in fields(TrainConfig)]
    overrides = {name: getattr(args, name, None) for name in names}
    overrides["wall_time"] = True if args.wall_time else None
    if args.no_dn:
        overrides["use_dn"] = False
    if args.no_bcp:
        overrides["use_bcp"] = False
    if args.no_mcs:
        overrides["use_mcs"] = False
    if args.no_bct:
        overrides["use_bct"] = False
    return overrides


def cmd_train(args) -> int:
    config = _load_config(args.config)
    cfg = _build(TrainConfig, config.get("train", {}), _train_overrides(args), "train")
    out = _resolve_out(args.out, "run")
    out.mkdir(parents=True, exist_ok=True)
    resolved = {"schema_version": SCHEMA_VERSION, "train": asdict(cfg)}
    (out / "config.json").write_text(json.dumps(resolved, sort_keys=True, indent=1) + "\n")
    try:
        summary = train_run(cfg, args.dataset, args.eval_dataset, out)
    except (FileNotFoundError, ValueError) as exc:
        _fail(str(exc))
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_is(args) -> int:
    try:
        rows = is_trace(args.snapshots)
    except (FileNotFoundError, ValueError) as exc:
        _fail(str(exc))
    out = _resolve_out(args.out, "is_trace.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    print(json.dumps({"path": str(out), "intervals": len(rows)}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    try:
        model = load_checkpoint(args.checkpoint)
        header, records = read_dataset(args.dataset)
    except (FileNotFoundError, ValueError) as exc:
        _fail(str(exc))
    alphabet = header["spec"]["alphabet_size"]
    if alphabet != model.cfg.alphabet_size:
        _fail(
            f"dataset alphabet_size {alphabet} disagrees with "
            f"checkpoint alphabet_size {model.cfg.alphabet_size}"
        )
    grid = header["spec"]["grid"]
    items = [(rasterize(instances, alphabet, grid), instances) for _, instances in records]
    report = evaluate_model(model, items, args.score_threshold, args.detect_threshold)
    report["images"] = len(items)
    print(json.dumps(report, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="denospot", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="write a synthetic scene dataset")
    gen.add_argument("--config", help="JSON config file with a 'scene' section")
    gen.add_argument("--out", help="dataset path (default dataset.jsonl)")
    gen.add_argument("--images", type=int, default=100)
    gen.add_argument("--start-index", type=int, default=0)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--alphabet-size", type=int)
    gen.add_argument("--grid", type=int)
    gen.add_argument("--min-instances", type=int)
    gen.add_argument("--max-instances", type=int)
    gen.add_argument("--min-transcript", type=int)
    gen.add_argument("--max-transcript", type=int)
    gen.add_argument("--inverse-fraction", type=float)
    gen.add_argument("--curvature-max", type=float)
    gen.set_defaults(func=cmd_gen)

    train = sub.add_parser("train", help="train on a generated dataset")
    train.add_argument("--config", help="JSON config file with a 'train' section")
    train.add_argument("--dataset", required=True)
    train.add_argument("--eval-dataset")
    train.add_argument("--out", help="run directory (default run/)")
    train.add_argument("--steps", type=int)
    train.add_argument("--snapshot-interval", type=int)
    train.add_argument("--seed", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--num-matching", type=int)
    train.add_argument("--dim", type=int)
    train.add_argument("--heads", type=int)
    train.add_argument("--layers", type=int)
    train.add_argument("--ffn-dim", type=int)
    train.add_argument("--dtype", choices=["float32", "float64"])
    train.add_argument("--no-dn", action="store_true", help="disable the denoising part")
    train.add_argument("--no-bcp", action="store_true", help="noise sampled points instead")
    train.add_argument("--no-mcs", action="store_true", help="left-align chars, no sliding")
    train.add_argument("--no-bct", action="store_true", help="drop the negative text loss")
    train.add_argument("--wall-time", action="store_true", help="stamp rows with wall time")
    train.set_defaults(func=cmd_train)

    is_cmd = sub.add_parser("is", help="instability trace from training snapshots")
    is_cmd.add_argument("--snapshots", required=True, help="snapshot directory of a run")
    is_cmd.add_argument("--out", help="trace path (default is_trace.jsonl)")
    is_cmd.set_defaults(func=cmd_is)

    ev = sub.add_parser("eval", help="detection/end-to-end report for a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--score-threshold", type=float, default=0.5)
    ev.add_argument("--detect-threshold", type=float, default=0.05)
    ev.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
