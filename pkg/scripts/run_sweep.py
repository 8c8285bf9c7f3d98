"""Sweep mask_ratio (or noise_ratio) over {0.1, ..., 0.9} for seeds {0, 1, 2}.

Each point is one shortened training run (5 epochs, decay at 3 and 4 by
default; override with --set). Writes results/sweep_<param>.csv and the config
used to results/sweep_<param>.json.

    python scripts/run_sweep.py [--param mask_ratio] [--set key=value ...]
"""
from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path

from cmpose.config import load_config
from cmpose.harness import sweep_ratios

SWEEP_SCHEDULE = ["epochs=5", "lr_decay_epochs=3,4"]
VALUES = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--param", choices=("mask_ratio", "noise_ratio"), default="mask_ratio")
    ap.add_argument("--values", default=VALUES)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--out-dir", default="results")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(None, SWEEP_SCHEDULE + args.set)
    out = Path(args.out_dir) / f"sweep_{args.param}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    values = [float(v) for v in args.values.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    out.with_suffix(".json").write_text(json.dumps(
        {"config": cfg.to_dict(), "param": args.param, "values": values, "seeds": seeds}, indent=2) + "\n")
    sweep_ratios(cfg, args.param, values, seeds, out)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
