"""Command-line entry point: ``cmpose <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config
from .embedder import ConfigError

log = logging.getLogger("cmpose")

CLUSTER_DEMO_POINTS = {
    "A": (0.0, 0.0), "B": (0.1, 0.0), "C": (0.0, 0.1),
    "D": (1.0, 1.0), "E": (1.0, 1.1), "F": (0.9, 1.0),
}


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _config(args) -> ExperimentConfig:
    return load_config(args.config, args.set)


def _add_config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", help="plain-text key = value file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")


# subcommands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    from .synthgen import generate_dataset, save_dataset

    ds = generate_dataset(args.seed, args.count, args.corruption_mix, paired=args.paired,
                          height=args.height, width=args.width)
    save_dataset(ds, args.out)
    counts = {str(t): int((ds.tag_names == t).sum()) for t in sorted(set(ds.tag_names))}
    print(f"wrote {len(ds)} samples to {args.out} ({counts})")
    return 0


def cmd_train(args) -> int:
    from .harness import TrainingDiverged, load_or_generate, train

    cfg = _config(args)
    for path in (cfg.train_path, cfg.val_path):
        if path and not Path(path).exists():
            print(f"error: dataset file {path} does not exist", file=sys.stderr)
            return 2
    try:
        res = train(cfg, load_or_generate(cfg, "train"), load_or_generate(cfg, "val"), out_dir=args.out)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    final = [r for r in res.rows if r["epoch"] == cfg.epochs and r["split"] == "val"]
    for r in final:
        print(f"epoch {r['epoch']} val {r['tag']:<9s} PCK@0.2 {r['PCK@0.2']:.4f}")
    print(f"checkpoint and metrics written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    from . import checkpoint as ckpt_io
    from .harness import evaluate, load_or_generate
    from .synthgen import load_dataset

    ckpt = ckpt_io.load(args.checkpoint)
    ds = load_dataset(args.data) if args.data else load_or_generate(ckpt.config, "val")
    tags = args.tags.split(",") if args.tags else None
    result = evaluate(ckpt, ds, tags)
    if args.json:
        print(json.dumps(result, indent=2, sort_keys=True))
    else:
        for tag, m in result.items():
            print(f"{tag:<9s} PCK@0.2 {m['pck']:.4f}  L_H {m['L_H']:.6f}")
    return 0


def cmd_ablate(args) -> int:
    from .harness import ABLATION_VARIANTS, ablate

    variants = args.variants.split(",") if args.variants else list(ABLATION_VARIANTS)
    unknown = [v for v in variants if v not in ABLATION_VARIANTS]
    if unknown:
        print(f"error: unknown variants {unknown}; choose from {list(ABLATION_VARIANTS)}", file=sys.stderr)
        return 2
    rows = ablate(_config(args), _ints(args.seeds), variants, args.out)
    for r in rows:
        if r["tag"] in ("clean", "corrupted"):
            print(f"{r['variant']:<13s} seed {r['seed']} {r['tag']:<9s} PCK@0.2 {r['pck']:.4f}")
    return 0


def cmd_sweep(args) -> int:
    from .harness import sweep_ratios

    rows = sweep_ratios(_config(args), args.param, _floats(args.values), _ints(args.seeds), args.out)
    for r in rows:
        print(f"{r['param']}={r['value']:.2f} seed {r['seed']} PCK@0.2 {r['pck']:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradcheck

    report = gradcheck(seeds=range(args.seeds), tol=args.tol)
    lines = report.lines()
    print("\n".join(lines if args.verbose else lines[-1:]))
    print(f"({report.seconds:.1f}s)")
    return 0 if report.passed else 1


def cmd_cluster_demo(args) -> int:
    from .fte import dpc_knn

    names = list(CLUSTER_DEMO_POINTS)
    x = np.array([CLUSTER_DEMO_POINTS[n] for n in names])
    res = dpc_knn(x, k=2, L=2)
    print("point      x      y        rho      delta      score")
    for i, n in enumerate(names):
        print(f"{n:>5s} {x[i, 0]:6.2f} {x[i, 1]:6.2f} {res.rho[i]:10.6f} {res.delta[i]:10.6f} {res.score[i]:10.6f}")
    centers = [names[c] for c in res.center_indices]
    print("centers:", ", ".join(centers))
    print("assignment:", ", ".join(f"{n}->{centers[a]}" for n, a in zip(names, res.assignment)))
    return 0


# parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmpose", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic clip dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--corruption-mix", default="clean:0.6,occlude:0.2,blur:0.2")
    p.add_argument("--paired", action="store_true", help="render every clip under every tag of the mix")
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=48)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model; writes checkpoint, metrics CSV and manifest")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="PCK@0.2 of a checkpoint per corruption tag")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset file (default: the checkpoint config's validation split)")
    p.add_argument("--tags", help="comma-separated tag filter")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train the auxiliary-task and FTE ablation variants")
    _add_config_args(p)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--variants", help="comma-separated subset of variants")
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="sweep mask_ratio or noise_ratio")
    _add_config_args(p)
    p.add_argument("--param", choices=("mask_ratio", "noise_ratio"), default="mask_ratio")
    p.add_argument("--values", default="0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and parameter group")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("cluster-demo", help="density-peaks clustering on the 6-point example")
    p.set_defaults(func=cmd_cluster_demo)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
