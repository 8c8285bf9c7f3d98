"""Train the ablation variants over seeds {0, 1, 2} and write per-variant PCK@0.2.

Writes results/ablation.csv (variant, seed, tag, pck) and results/ablation.json
(the config used). Defaults to the variants the trend checks compare: full,
primary_only (no auxiliary tasks) and causal_only (non-causal tokens discarded).

    python scripts/run_ablation.py [--variants full,primary_only,...] [--set key=value ...]
"""
from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path

from cmpose.config import load_config
from cmpose.harness import ABLATION_VARIANTS, ablate

DEFAULT_VARIANTS = "full,primary_only,causal_only"


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--variants", default=DEFAULT_VARIANTS, help=f"subset of {','.join(ABLATION_VARIANTS)}")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--out", default="results/ablation.csv")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(None, args.set)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    seeds = [int(s) for s in args.seeds.split(",")]
    variants = args.variants.split(",")
    out.with_suffix(".json").write_text(json.dumps(
        {"config": cfg.to_dict(), "seeds": seeds, "variants": variants}, indent=2) + "\n")
    ablate(cfg, seeds, variants, out)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
