"""``symcorr`` command line: gen, train, infer, eval.

Exit codes are 0 on success, 1 on a usage error and 2 when the run itself
fails. Settings resolve as command-line flags over ``--config`` JSON over
built-in defaults, and every run writes the resolved settings to
``run_config.json`` in its output directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .evaluation import evaluate, heatmap, inference_path_for
from .inference import extract_modes, write_heatmap_csv, write_heatmap_png
from .model import DescriptorNet, ModelConfig
from .synthgen import GenerationError, MeshConfig, ObjectKind, generate_dataset, load_dataset
from .train import TrainConfig, train

log = logging.getLogger("symcorr")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _pixel(text: str):
    try:
        r, c = (int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected ROW,COL, got {text!r}")
    return r, c


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="global seed (default 0)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--config", type=Path, default=None, help="JSON file of settings; flags override it")
    p.add_argument("--threads", type=int, default=None, help="BLAS threads (default: available cores)")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="symcorr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="render a synthetic rope/cloth dataset")
    _common(g)
    g.add_argument("--kind", choices=[k.value for k in ObjectKind])
    g.add_argument("--train", type=int, dest="count_train")
    g.add_argument("--test", type=int, dest="count_test")
    g.add_argument("--size", type=int, help="square image side in pixels")
    g.add_argument("--vertices", type=int, dest="vertex_count", help="rope length V or cloth grid side N")

    t = sub.add_parser("train", help="train a descriptor network")
    _common(t)
    t.add_argument("--data", type=Path, required=True, help="dataset directory")
    t.add_argument("--loss", choices=["pcl", "spcl", "mmgsd"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-schedule", choices=["constant", "cosine"], dest="lr_schedule")
    t.add_argument("--margin", type=float)
    t.add_argument("--sigma", type=float)
    t.add_argument("--matches", type=int, dest="matches_per_pair")
    t.add_argument("--nonmatches", type=int, dest="nonmatches_per_match")
    t.add_argument("--descriptor-dim", type=int, dest="descriptor_dim")

    i = sub.add_parser("infer", help="heatmaps and modes for chosen source pixels")
    _common(i)
    i.add_argument("--checkpoint", type=Path, required=True)
    i.add_argument("--data", type=Path, required=True)
    i.add_argument("--pair", type=int, required=True, dest="pair_id")
    i.add_argument("--src", type=_pixel, action="append", required=True, help="source pixel ROW,COL (repeatable)")
    i.add_argument("--modes", type=int, help="mode count (default: annotated n, else symmetry order)")
    i.add_argument("--sigma", type=float)

    e = sub.add_parser("eval", help="evaluate one or more checkpoints on a split")
    _common(e)
    e.add_argument("--checkpoint", type=Path, action="append", required=True, help="repeatable")
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--split", default=None)
    e.add_argument("--sources", type=int, dest="source_count", help="source vertices per pair (default all)")
    e.add_argument("--sigma", type=float)
    return parser


# ------------------------------------------------------------------ config


GEN_DEFAULTS = {"seed": 0, "count_train": 200, "count_test": 50, "mesh": MeshConfig().to_dict()}
INFER_DEFAULTS = {"seed": 0, "sigma": 1.0, "modes": None}
EVAL_DEFAULTS = {"seed": 0, "sigma": 1.0, "split": "test", "source_count": None}


def _read_config(path: Optional[Path]) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return data


def _flags(args, names: Sequence[str]) -> dict:
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


def _merge(defaults: dict, file_cfg: dict, flags: dict, allowed: Sequence[str]) -> dict:
    unknown = set(file_cfg) - set(allowed)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    out = dict(defaults)
    out.update(file_cfg)
    out.update(flags)
    return out


def _write_snapshot(out: Path, command: str, resolved: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps({"command": command, **resolved}, indent=1, sort_keys=True) + "\n")


def resolve_gen(args) -> dict:
    file_cfg = _read_config(args.config)
    mesh = dict(GEN_DEFAULTS["mesh"])
    mesh_keys = set(mesh)
    mesh.update({k: v for k, v in file_cfg.get("mesh", {}).items()})
    flags = _flags(args, ["kind", "vertex_count"])
    if args.size is not None:
        flags["image_size"] = [args.size, args.size]
    unknown = set(mesh) - mesh_keys
    if unknown:
        raise UsageError(f"unknown mesh config keys: {sorted(unknown)}")
    mesh.update(flags)
    top = _merge({k: v for k, v in GEN_DEFAULTS.items() if k != "mesh"},
                 {k: v for k, v in file_cfg.items() if k != "mesh"},
                 _flags(args, ["seed", "count_train", "count_test"]), ["seed", "count_train", "count_test"])
    return {**top, "mesh": mesh}


def resolve_train(args) -> dict:
    file_cfg = _read_config(args.config)
    model_file = file_cfg.pop("model", {})
    train_keys = list(TrainConfig.__dataclass_fields__)
    resolved = _merge(TrainConfig().to_dict(), file_cfg,
                      _flags(args, ["seed", "loss", "epochs", "lr", "lr_schedule", "margin", "sigma",
                                    "matches_per_pair", "nonmatches_per_match"]), train_keys)
    model = dict(ModelConfig().to_dict())
    unknown = set(model_file) - set(model)
    if unknown:
        raise UsageError(f"unknown model config keys: {sorted(unknown)}")
    model.update(model_file)
    if args.descriptor_dim is not None:
        model["descriptor_dim"] = args.descriptor_dim
    return {"train": resolved, "model": model}


# ------------------------------------------------------------------ commands


def cmd_gen(args) -> int:
    cfg = resolve_gen(args)
    mesh = MeshConfig.from_dict(cfg["mesh"])
    ds = generate_dataset(args.out, mesh, cfg["count_train"], cfg["count_test"], cfg["seed"])
    _write_snapshot(args.out, "gen", cfg)
    print(f"wrote {len(ds.pairs)} pairs ({cfg['count_train']} train / {cfg['count_test']} test) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_train(args)
    tcfg = TrainConfig(**cfg["train"])
    tcfg.validate()
    ds = load_dataset(args.data)
    pairs = ds.load_split("train")
    if not pairs:
        raise ValueError(f"dataset {args.data} has no training pairs")
    cfg["model"]["image_size"] = list(ds.config.image_size)
    cfg["data"] = str(args.data)
    model = DescriptorNet(ModelConfig.from_dict(cfg["model"]), seed=tcfg.seed)
    result = train(model, pairs, tcfg)

    out: Path = args.out
    _write_snapshot(out, "train", cfg)
    model.save(out / "model.sckp", {"loss": tcfg.loss, "train_config": tcfg.to_dict(), "kind": ds.config.kind.value})
    with open(out / "loss_curve.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["epoch", "mean_loss"])
        for epoch, loss in result.curve:
            wr.writerow([epoch, repr(loss)])
    summary = {"loss": tcfg.loss, "epochs": tcfg.epochs, "initial_loss": result.initial_loss,
               "final_loss": result.final_loss, "train_pairs": len(pairs)}
    (out / "train_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(f"{tcfg.loss}: initial loss {result.initial_loss:.4f} -> final {result.final_loss:.4f}; "
          f"checkpoint {out / 'model.sckp'}")
    return EXIT_OK


def _load_model(path: Path):
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return DescriptorNet.load(path)


def cmd_infer(args) -> int:
    cfg = _merge(INFER_DEFAULTS, _read_config(args.config), _flags(args, ["seed", "sigma", "modes"]),
                 list(INFER_DEFAULTS))
    model, meta = _load_model(args.checkpoint)
    ds = load_dataset(args.data)
    pair = ds.load_pair(args.pair_id)
    h, w = pair.image_a.shape
    for r, c in args.src:
        if not (0 <= r < h and 0 <= c < w):
            raise IndexError(f"source pixel ({r}, {c}) is outside the {h}x{w} image")
    path = inference_path_for(meta.get("loss", "mmgsd"))
    desc_a, desc_b = model.describe(pair.image_a), model.describe(pair.image_b)
    by_src = {tuple(e.src): e for e in pair.entries}
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    resolved = {**cfg, "checkpoint": str(args.checkpoint), "data": str(args.data), "pair_id": args.pair_id,
                "src": [list(s) for s in args.src], "inference_path": path}
    _write_snapshot(out, "infer", resolved)
    for r, c in args.src:
        entry = by_src.get((r, c))
        n = cfg["modes"] or (entry.n if entry is not None else pair.kind.symmetry_order)
        grid = heatmap(path, desc_a, (r, c), desc_b)
        ms = extract_modes(grid, n, sigma=cfg["sigma"], strict=False)
        stem = out / f"pair{args.pair_id:05d}_src{r}_{c}"
        write_heatmap_csv(f"{stem}_heatmap.csv", grid)
        write_heatmap_png(f"{stem}_heatmap.png", grid)
        ms.write_json(f"{stem}_modes.json")
        modes = ", ".join(f"({m.u:.1f}, {m.v:.1f}) w={m.weight:.2f}" for m in ms.modes)
        print(f"src ({r}, {c}): entropy {ms.entropy:.3f}; modes {modes}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _merge(EVAL_DEFAULTS, _read_config(args.config), _flags(args, ["seed", "sigma", "split", "source_count"]),
                 list(EVAL_DEFAULTS))
    ds = load_dataset(args.data)
    pairs = ds.load_split(cfg["split"])
    if not pairs:
        raise ValueError(f"split {cfg['split']!r} of {args.data} is empty")
    out: Path = args.out
    _write_snapshot(out, "eval", {**cfg, "checkpoints": [str(p) for p in args.checkpoint], "data": str(args.data)})
    rows = []
    used: Dict[str, int] = {}
    for ckpt in args.checkpoint:
        model, meta = _load_model(ckpt)
        loss = meta.get("loss", "mmgsd")
        stem = loss if loss not in used else f"{loss}_{used[loss]}"
        used[loss] = used.get(loss, 0) + 1
        report = evaluate(model, pairs, inference_path_for(loss), source_count=cfg["source_count"],
                          sigma=cfg["sigma"], seed=cfg["seed"], method=stem)
        report.write(out, stem)
        rows.append({"method": stem, "rmse": report.rmse,
                     "mean_squared_error": report.mean_squared_error, "mean_entropy": report.mean_entropy,
                     "num_sources": len(report.records)})
    (out / "comparison.json").write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")
    print(format_table(rows))
    return EXIT_OK


def format_table(rows: List[dict]) -> str:
    header = f"{'method':<12} {'RMSE px':>9} {'MSE px^2':>10} {'entropy':>8} {'sources':>8}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r['method']:<12} {r['rmse']:>9.3f} {r['mean_squared_error']:>10.3f} "
                     f"{r['mean_entropy']:>8.3f} {r['num_sources']:>8d}")
    return "\n".join(lines)


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits with our usage code, or 0 for --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
    if threads < 1:
        print(f"symcorr: error: --threads must be >= 1, got {threads}", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"symcorr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError, IndexError, OSError, GenerationError, T.CheckpointError) as exc:
        print(f"symcorr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
