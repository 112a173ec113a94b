"""Command-line entry point: ``gaeguide {train,ablate,report}``.

Exit codes: 0 success, 1 runtime failure (e.g. divergence), 2 invalid
config, missing input path or missing runs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from gaeguide.data import DataError
from gaeguide.experiment import ConfigError, ExperimentConfig, dump_json, load_config, run_seed, seed_dir
from gaeguide.report import MissingRunsError, write_report

log = logging.getLogger("gaeguide")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _job(args):
    cfg, seed, mode, out, dump = args
    run_seed(cfg, seed, mode, out, dump)
    return seed


def _run_jobs(jobs, threads: int):
    if threads <= 1 or len(jobs) <= 1:
        return [_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_job, jobs))


def _prepare(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed_override is not None:
        cfg = cfg.with_seeds(args.seed_override)
    if args.out is not None:
        cfg = replace(cfg, out=str(Path(args.out)))
    return cfg


def cmd_train(args) -> int:
    cfg = _prepare(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(cfg.resolved(), out / "config.resolved.json")
    modes = ["baseline", "guided"] if args.mode == "both" else [args.mode]
    jobs = [(cfg, s, m, seed_dir(out, m, s), args.dump_traces) for m in modes for s in cfg.seeds]
    _run_jobs(jobs, args.threads)
    print(f"wrote {len(jobs)} run(s) under {out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _prepare(args)
    ks = []
    for k in args.k:
        if k in ks:
            log.warning("duplicate k=%d ignored", k)
        else:
            ks.append(k)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_json({**cfg.resolved(), "k_values": ks}, out / "config.resolved.json")
    jobs = []
    for k in ks:
        kcfg = replace(cfg, train=replace(cfg.train, attack=replace(cfg.train.attack, k=k)))
        jobs += [(kcfg, s, "guided", out / f"k_{k}" / f"seed_{s}", False) for s in cfg.seeds]
    _run_jobs(jobs, args.threads)

    rows = []
    for k in ks:
        recs = [json.loads((out / f"k_{k}" / f"seed_{s}" / "metrics.json").read_text()) for s in cfg.seeds]
        mean = float(np.mean([r["accuracy"] for r in recs]))
        for s, r in zip(cfg.seeds, recs):
            rows.append([k, s, f"{r['accuracy']:.6f}", f"{mean:.6f}", " ".join(map(str, r["gae_count"]))])
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "seed", "accuracy", "mean", "gae_count"])
        w.writerows(rows)
    for k in ks:
        mean = next(r[3] for r in rows if r[0] == k)
        print(f"k={k} mean accuracy {mean}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise MissingRunsError(f"no such run directory: {run_dir}")
    sys.stdout.write(write_report(run_dir))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gaeguide", description="Long-tailed training with guiding adversarial examples.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", help="experiment config (JSON)")
        sp.add_argument("--out", help="output directory (overrides the config)")
        sp.add_argument("--seed-override", type=_int_list, metavar="S[,S...]", help="replace the config's seed list")
        sp.add_argument("--threads", type=int, default=1, help="worker processes; seeds run in parallel")

    t = sub.add_parser("train", help="train baseline and/or guided models")
    common(t)
    mode = t.add_mutually_exclusive_group(required=True)
    mode.add_argument("--baseline", dest="mode", action="store_const", const="baseline")
    mode.add_argument("--guided", dest="mode", action="store_const", const="guided")
    mode.add_argument("--both", dest="mode", action="store_const", const="both")
    t.add_argument("--dump-traces", action="store_true", help="write every attack trace to traces.jsonl")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="guided runs over several k values")
    common(a)
    a.add_argument("--k", type=_int_list, required=True, metavar="K[,K...]")
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="summarise a finished run directory")
    r.add_argument("run_dir")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError, MissingRunsError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
