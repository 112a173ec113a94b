"""Long-tailed FashionMNIST (rho=0.01), MLP-256: CE vs guided top-1 over three seeds.

    python3 scripts/fashion_check.py /path/to/fashion-mnist

The directory must hold the four IDX files (optionally gzipped).
"""

import argparse
import json
from pathlib import Path

import numpy as np

from gaeguide.experiment import parse_config, run_seed

ROOT = Path(__file__).resolve().parents[1]
STEMS = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
KEYS = ("train_images", "train_labels", "test_images", "test_labels")


def locate(d: Path, stem: str) -> str:
    for name in (stem, stem + ".gz"):
        if (d / name).exists():
            return str(d / name)
    raise SystemExit(f"missing {stem}[.gz] in {d}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("data_dir", type=Path)
    ap.add_argument("--config", type=Path, default=ROOT / "configs" / "fashion_mnist.json")
    args = ap.parse_args()
    raw = json.loads(args.config.read_text())
    raw["dataset"].update({k: locate(args.data_dir, s) for k, s in zip(KEYS, STEMS)})
    cfg = parse_config(raw, args.config.parent)
    acc = {}
    for mode in ("baseline", "guided"):
        acc[mode] = [run_seed(cfg, s, mode).metrics.accuracy for s in cfg.seeds]
        print(f"{mode:8s} " + " ".join(f"{a:.4f}" for a in acc[mode]) + f"  mean {np.mean(acc[mode]):.4f}")
    print(f"gain {np.mean(acc['guided']) - np.mean(acc['baseline']):+.4f}")


if __name__ == "__main__":
    main()
