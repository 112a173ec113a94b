"""Summaries built from the metrics files of a finished run directory.

The report never touches models or data, so re-running it on the same
directory rewrites identical files.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

MODES = ("baseline", "guided")


class MissingRunsError(FileNotFoundError):
    pass


def load_runs(run_dir) -> dict[str, list[dict]]:
    run_dir = Path(run_dir)
    runs = {}
    for mode in MODES:
        files = sorted((run_dir / mode).glob("seed_*/metrics.json"), key=lambda p: int(p.parent.name[5:]))
        runs[mode] = [json.loads(f.read_text()) for f in files]
    if not any(runs.values()):
        raise MissingRunsError(f"no metrics.json files under {run_dir}/baseline or {run_dir}/guided")
    return runs


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


def _mean(records, key):
    return float(np.mean([r[key] for r in records])) if records else None


def write_report(run_dir) -> str:
    """Write per_class.csv, gae_series.csv and summary.txt under ``run_dir/report``.

    Returns the summary text.
    """
    run_dir = Path(run_dir)
    runs = load_runs(run_dir)
    base, guided = runs["baseline"], runs["guided"]
    out = run_dir / "report"
    out.mkdir(exist_ok=True)
    ref = (base or guided)[0]
    counts = ref["train_counts"]
    C = len(counts)

    per_class = {m: np.mean([r["per_class_accuracy"] for r in runs[m]], axis=0) if runs[m] else None for m in MODES}
    with open(out / "per_class.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "train_count", "baseline", "guided", "delta"])
        for c in range(C):
            b = None if per_class["baseline"] is None else per_class["baseline"][c]
            g = None if per_class["guided"] is None else per_class["guided"][c]
            d = None if b is None or g is None else g - b
            w.writerow([c, counts[c], _fmt(b), _fmt(g), _fmt(d)])

    if guided:
        seeds = [r["seed"] for r in guided]
        series = np.array([r["gae_count"] for r in guided])
        with open(out / "gae_series.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "phase", "mean"] + [f"seed_{s}" for s in seeds])
            for e in range(series.shape[1]):
                w.writerow([e, guided[0]["phase"][e], _fmt(series[:, e].mean())] + series[:, e].tolist())

    lines = [f"run directory: {run_dir.name}", f"classes: {C}, train counts: {counts}"]
    stats = {}
    for m in MODES:
        if runs[m]:
            stats[m] = {k: _mean(runs[m], k) for k in ("accuracy", "head_recall", "tail_recall")}
            lines.append(
                f"{m:8s} seeds={len(runs[m])} accuracy={stats[m]['accuracy']:.4f} "
                f"head={stats[m]['head_recall']:.4f} tail={stats[m]['tail_recall']:.4f}"
            )
        else:
            lines.append(f"{m:8s} no runs found; comparison columns left blank")
    if len(stats) == 2:
        for k in ("accuracy", "head_recall", "tail_recall"):
            lines.append(f"delta {k}: {stats['guided'][k] - stats['baseline'][k]:+.4f}")
    if guided:
        post = series[:, [i for i, p in enumerate(guided[0]["phase"]) if p == "guided"]]
        if post.size:
            lines.append(f"GAEs per guided epoch (seed mean): first {post[:, 0].mean():.1f}, last {post[:, -1].mean():.1f}")
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text)
    return text
