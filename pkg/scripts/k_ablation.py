"""Seed-averaged accuracy and GAEs per guided epoch for several attack step counts.

    python3 scripts/k_ablation.py --k 1,3,5,7,9 [--config ...] [--seeds 0,1,2]
"""

import argparse
from dataclasses import replace
from pathlib import Path

import numpy as np

from gaeguide.experiment import load_config, run_seed

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=ROOT / "configs" / "synthetic_rho001.json")
    ap.add_argument("--k", default="1,3,9")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    args = ap.parse_args()
    cfg = load_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",")]
    print(f"{'k':>3} {'acc':>7} {'tail':>7} {'GAEs/epoch':>11}")
    for k in sorted({int(v) for v in args.k.split(",")}):
        kcfg = replace(cfg, train=replace(cfg.train, attack=replace(cfg.train.attack, k=k)))
        recs = [run_seed(kcfg, s, "guided").to_record() for s in seeds]
        gaes = np.mean([np.mean([c for c, ph in zip(r["gae_count"], r["phase"]) if ph == "guided"]) for r in recs])
        print(f"{k:3d} {np.mean([r['accuracy'] for r in recs]):7.4f} "
              f"{np.mean([r['tail_recall'] for r in recs]):7.4f} {gaes:11.2f}")


if __name__ == "__main__":
    main()
