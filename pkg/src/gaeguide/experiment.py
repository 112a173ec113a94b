"""Experiment configs and single-seed runs shared by the CLI and scripts.

A config is one JSON object::

    {
      "dataset": {"source": "synthetic", "num_classes": 10, "n_max": 1000, "rho": 0.01, ...},
      "model": {"hidden": [64]},
      "train": {... TrainConfig fields ...},
      "seeds": [0, 1, 2, 3, 4],
      "out": "runs/example"
    }

Relative paths are resolved against the directory holding the config file.
Missing fields take their defaults, and :meth:`ExperimentConfig.resolved`
returns the fully materialised form written next to every run.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from gaeguide.attack import AttackConfig
from gaeguide.data import (
    LAYOUTS,
    Dataset,
    LongTailSpec,
    build_longtail,
    load_csv,
    load_idx,
    synth_gaussians,
)
from gaeguide.gae import GaeLog
from gaeguide.models import ModelSpec, init_model, save_checkpoint
from gaeguide.train import RunMetrics, TrainConfig, head_tail_recall, train_ce, train_guided

log = logging.getLogger(__name__)

SOURCES = ("synthetic", "idx", "csv")
TEST_SEED_OFFSET = 10_000


class ConfigError(ValueError):
    """Invalid experiment config. ``field`` is the dotted path of the offending entry."""

    def __init__(self, field_path: str, message: str):
        self.field = field_path
        super().__init__(f"{field_path}: {message}")


@dataclass(frozen=True)
class DatasetManifest:
    source: str = "synthetic"
    num_classes: int = 10
    n_max: int = 1000
    rho: float = 0.01
    # synthetic only
    sigma: float = 0.04
    layout: str = "interleaved"
    test_per_class: int = 500
    # idx / csv only
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_csv: str | None = None
    test_csv: str | None = None
    # None means "use the run seed"
    data_seed: int | None = None

    def paths(self) -> dict[str, str]:
        if self.source == "idx":
            keys = ("train_images", "train_labels", "test_images", "test_labels")
        elif self.source == "csv":
            keys = ("train_csv", "test_csv")
        else:
            keys = ()
        return {k: getattr(self, k) for k in keys}

    def validate(self) -> None:
        if self.source not in SOURCES:
            raise ConfigError("dataset.source", f"expected one of {SOURCES}, got {self.source!r}")
        if self.layout not in LAYOUTS:
            raise ConfigError("dataset.layout", f"expected one of {LAYOUTS}, got {self.layout!r}")
        try:
            LongTailSpec(self.num_classes, self.n_max, self.rho)
        except ValueError as exc:
            raise ConfigError("dataset", str(exc)) from exc
        if self.test_per_class < 1:
            raise ConfigError("dataset.test_per_class", "must be positive")
        for key, value in self.paths().items():
            if value is None:
                raise ConfigError(f"dataset.{key}", f"required for source {self.source!r}")
            if not Path(value).exists():
                raise ConfigError(f"dataset.{key}", f"no such file: {value}")

    def load(self, seed: int) -> tuple[Dataset, Dataset]:
        """Long-tailed training set and balanced test set for one run seed."""
        s = seed if self.data_seed is None else self.data_seed
        spec = LongTailSpec(self.num_classes, self.n_max, self.rho)
        if self.source == "synthetic":
            train = synth_gaussians(spec, seed=s, sigma=self.sigma, layout=self.layout)
            test_spec = LongTailSpec(self.num_classes, self.test_per_class, 1.0)
            test = synth_gaussians(test_spec, seed=TEST_SEED_OFFSET + s, sigma=self.sigma, layout=self.layout)
            return train, test
        if self.source == "idx":
            source = load_idx(self.train_images, self.train_labels, self.num_classes)
            test = load_idx(self.test_images, self.test_labels, self.num_classes)
        else:
            source = load_csv(self.train_csv, self.num_classes)
            test = load_csv(self.test_csv, self.num_classes)
        return build_longtail(source, spec, seed=s), test


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetManifest = field(default_factory=DatasetManifest)
    hidden: tuple[int, ...] = (64,)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: tuple[int, ...] = (0,)
    out: str = "runs/default"

    def model_spec(self, input_dim: int) -> ModelSpec:
        return ModelSpec(input_dim, self.dataset.num_classes, self.hidden)

    def resolved(self) -> dict:
        ds = {f.name: getattr(self.dataset, f.name) for f in fields(DatasetManifest)}
        return {
            "dataset": ds,
            "model": {"hidden": list(self.hidden)},
            "train": self.train.to_dict(),
            "seeds": list(self.seeds),
            "out": self.out,
        }

    def with_seeds(self, seeds) -> ExperimentConfig:
        return replace(self, seeds=tuple(int(s) for s in seeds))


def _check_keys(section: str, given: dict, allowed) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}" if section else unknown[0], "unknown field")


def _resolve_path(value, base: Path):
    if value is None:
        return None
    p = Path(value)
    return str(p if p.is_absolute() else (base / p))


def parse_config(raw: dict, base_dir: Path | str = ".") -> ExperimentConfig:
    """Validate a config dict and fill in defaults."""
    base = Path(base_dir)
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    _check_keys("", raw, ("dataset", "model", "train", "seeds", "out"))

    ds_raw = dict(raw.get("dataset", {}))
    _check_keys("dataset", ds_raw, [f.name for f in fields(DatasetManifest)])
    for key in ("train_images", "train_labels", "test_images", "test_labels", "train_csv", "test_csv"):
        ds_raw[key] = _resolve_path(ds_raw.get(key), base)
    dataset = DatasetManifest(**ds_raw)
    dataset.validate()

    model_raw = raw.get("model", {})
    _check_keys("model", model_raw, ("hidden",))
    hidden = tuple(int(h) for h in model_raw.get("hidden", (64,)))
    try:
        ModelSpec(1, dataset.num_classes, hidden)
    except ValueError as exc:
        raise ConfigError("model.hidden", str(exc)) from exc

    train_raw = dict(raw.get("train", {}))
    _check_keys("train", train_raw, [f.name for f in fields(TrainConfig)])
    attack_raw = train_raw.pop("attack", {})
    _check_keys("train.attack", attack_raw, [f.name for f in fields(AttackConfig)])
    try:
        attack = AttackConfig(**attack_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError("train.attack", str(exc)) from exc
    try:
        train = TrainConfig(attack=attack, **train_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError("train", str(exc)) from exc

    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds", "must be a nonempty list of integers")
    out = _resolve_path(raw.get("out", "runs/default"), base)
    return ExperimentConfig(dataset, hidden, train, tuple(seeds), out)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("config", f"no such file: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{path} is not valid JSON ({exc})") from exc
    return parse_config(raw, path.parent)


def dump_json(obj, path) -> None:
    """Deterministic JSON: sorted keys, fixed separators, trailing newline."""
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


@dataclass
class SeedResult:
    seed: int
    mode: str
    metrics: RunMetrics
    train_counts: list[int]

    def to_record(self) -> dict:
        head, tail = head_tail_recall(self.metrics.per_class_accuracy, self.train_counts)
        return {
            "seed": self.seed,
            "mode": self.mode,
            "train_counts": self.train_counts,
            "head_recall": head,
            "tail_recall": tail,
            **self.metrics.to_dict(),
        }


def run_seed(cfg: ExperimentConfig, seed: int, mode: str, out_dir=None, dump_traces: bool = False) -> SeedResult:
    """Train one model. With ``out_dir`` set, writes metrics, checkpoints and the GAE audit log."""
    if mode not in ("baseline", "guided"):
        raise ValueError(f"mode must be 'baseline' or 'guided', got {mode!r}")
    train, test = cfg.dataset.load(seed)
    model = init_model(cfg.model_spec(train.dim), seed)
    tcfg = replace(cfg.train, seed=seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def on_warmup_end(m):
        if out is not None:
            save_checkpoint(m, out / "checkpoint_warmup.ckpt")

    trace_fh = open(out / "traces.jsonl", "w") if (out is not None and dump_traces and mode == "guided") else None

    def on_attack(epoch, ids, traces):
        for sid, tr in zip(ids.tolist(), traces):
            trace_fh.write(json.dumps({"epoch": epoch, **tr.to_record(sid)}, sort_keys=True) + "\n")

    try:
        if mode == "baseline":
            model, metrics = train_ce(model, train, tcfg, test, on_warmup_end)
            gae_log = None
        else:
            gae_log = GaeLog(train.num_classes)
            model, metrics = train_guided(
                model, train, tcfg, test, on_warmup_end, gae_log=gae_log,
                on_attack=on_attack if trace_fh is not None else None,
            )
    finally:
        if trace_fh is not None:
            trace_fh.close()

    result = SeedResult(seed, mode, metrics, train.counts)
    if out is not None:
        save_checkpoint(model, out / "checkpoint_final.ckpt")
        dump_json(result.to_record(), out / "metrics.json")
        if gae_log is not None:
            with open(out / "gae_audit.jsonl", "w") as fh:
                for stats in gae_log.epochs:
                    fh.write(json.dumps(stats.to_record(), sort_keys=True) + "\n")
    log.info("%s seed %d accuracy %.4f", mode, seed, metrics.accuracy)
    return result


def seed_dir(out, mode: str, seed: int) -> Path:
    return Path(out) / mode / f"seed_{seed}"


def mean_per_class(results) -> np.ndarray:
    return np.mean([r.metrics.per_class_accuracy for r in results], axis=0)
