"""Cross-entropy baseline and GAE-guided training loops, plus evaluation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from gaeguide.attack import AttackConfig, AttackTrace, batch_attack
from gaeguide.autodiff import NonFiniteError, Tensor, backward, cross_entropy
from gaeguide.data import Dataset
from gaeguide.gae import GaeLog, partition_classes, select_gaes
from gaeguide.models import Model, ModelSpec, init_model, predict

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, detail: str = ""):
        self.epoch = epoch
        super().__init__(f"training diverged in epoch {epoch}" + (f": {detail}" if detail else ""))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    warmup_epochs: int | None = None  # None -> half of epochs
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    lr_schedule: str = "constant"  # or "step"
    lr_decay_epochs: tuple[int, ...] = ()
    lr_decay_factor: float = 0.1
    lambda_cross: float = 1.0
    attack: AttackConfig = field(default_factory=AttackConfig)
    partition_rule: str | tuple[int, ...] = "below_mean"
    acceptance_rule: str = "head_only"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.attack, dict):
            object.__setattr__(self, "attack", AttackConfig(**self.attack))
        if not isinstance(self.partition_rule, str):
            object.__setattr__(self, "partition_rule", tuple(int(c) for c in self.partition_rule))
        object.__setattr__(self, "lr_decay_epochs", tuple(int(e) for e in self.lr_decay_epochs))
        if self.warmup_epochs is None:
            object.__setattr__(self, "warmup_epochs", self.epochs // 2)
        if self.epochs < 0 or not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError(f"need 0 <= warmup_epochs ({self.warmup_epochs}) <= epochs ({self.epochs})")
        if self.lambda_cross < 0:
            raise ValueError("lambda_cross must be >= 0")
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("batch_size and learning_rate must be positive")
        if self.lr_schedule not in ("constant", "step"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "constant":
            return self.learning_rate
        drops = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.learning_rate * self.lr_decay_factor**drops

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attack"]["clamp_range"] = list(self.attack.clamp_range)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        if not isinstance(self.partition_rule, str):
            d["partition_rule"] = list(self.partition_rule)
        return d


@dataclass
class RunMetrics:
    train_loss: list[float] = field(default_factory=list)
    cross_loss: list[float | None] = field(default_factory=list)
    gae_count: list[int] = field(default_factory=list)
    phase: list[str] = field(default_factory=list)
    accuracy: float | None = None
    per_class_accuracy: list[float] | None = None
    confusion: list[list[int]] | None = None
    gae_transfers: list[list[int]] | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RunMetrics:
        return cls(**d)

    def set_final(self, final: RunMetrics) -> None:
        self.accuracy = final.accuracy
        self.per_class_accuracy = final.per_class_accuracy
        self.confusion = final.confusion


class SGD:
    def __init__(self, params: Sequence[Tensor], momentum: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            if self.momentum:
                v *= self.momentum
                v += p.grad
                p.data = p.data - lr * v
            else:
                p.data = p.data - lr * p.grad


def evaluate(model: Model, test: Dataset) -> RunMetrics:
    """Top-1 accuracy, per-class recall and confusion matrix (rows = true class)."""
    C = model.num_classes
    confusion = np.zeros((C, C), dtype=np.int64)
    if len(test):
        pred = predict(model, test.features).data.argmax(axis=1)
        np.add.at(confusion, (test.labels, pred), 1)
    support = confusion.sum(axis=1)
    per_class = np.divide(np.diag(confusion), support, out=np.zeros(C), where=support > 0)
    total = confusion.sum()
    return RunMetrics(
        accuracy=float(np.trace(confusion) / total) if total else 0.0,
        per_class_accuracy=[float(a) for a in per_class],
        confusion=confusion.tolist(),
    )


def _fit(
    model: Model,
    train: Dataset,
    cfg: TrainConfig,
    guided: bool,
    test: Dataset | None,
    on_warmup_end: Callable[[Model], None] | None,
    gae_log: GaeLog | None = None,
    on_attack: Callable[[int, np.ndarray, list[AttackTrace]], None] | None = None,
    on_epoch_end: Callable[[int, Model], None] | None = None,
) -> tuple[Model, RunMetrics]:
    if len(train) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(model.params, cfg.momentum)
    counts = train.counts
    partition = partition_classes(counts, cfg.partition_rule)
    tail_mask = np.zeros(train.num_classes, dtype=bool)
    tail_mask[list(partition.tail_classes)] = True
    gae_log = gae_log if gae_log is not None else GaeLog(train.num_classes)
    metrics = RunMetrics()

    for epoch in range(cfg.epochs):
        if epoch == cfg.warmup_epochs and on_warmup_end is not None:
            on_warmup_end(model)
        guiding = guided and epoch >= cfg.warmup_epochs
        lr = cfg.lr_at(epoch)
        gae_log.start_epoch(epoch)
        order = rng.permutation(len(train))
        losses, cross_losses = [], []
        try:
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                xb, yb = train.features[idx], train.labels[idx]
                model.zero_grad()
                loss = cross_entropy(model.logits(xb), yb)
                losses.append(loss.item())
                if guiding:
                    tail = tail_mask[yb]
                    if tail.any():
                        traces = batch_attack(model, xb[tail], yb[tail], cfg.attack)
                        if on_attack is not None:
                            on_attack(epoch, idx[tail], traces)
                        gaes = select_gaes(traces, partition, counts, cfg.acceptance_rule, dim=train.dim)
                        gae_log.add(gaes)
                        if len(gaes) and cfg.lambda_cross > 0:
                            # labels are the original tail labels, never the landing class
                            assert np.array_equal(gaes.y_tail_prime, gaes.source_class)
                            cross = cross_entropy(model.logits(gaes.x_cross), gaes.y_tail_prime)
                            cross_losses.append(cross.item())
                            loss = loss + cfg.lambda_cross * cross
                backward(loss)
                opt.step(lr)
        except NonFiniteError as exc:
            raise TrainingDivergedError(epoch, str(exc)) from exc
        metrics.train_loss.append(float(np.mean(losses)))
        metrics.cross_loss.append(float(np.mean(cross_losses)) if cross_losses else None)
        metrics.gae_count.append(gae_log.epochs[-1].count)
        metrics.phase.append("guided" if guiding else "warmup")
        log.debug("epoch %d loss %.4f gaes %d", epoch, metrics.train_loss[-1], metrics.gae_count[-1])
        if on_epoch_end is not None:
            on_epoch_end(epoch, model)

    if cfg.warmup_epochs == cfg.epochs and on_warmup_end is not None:
        on_warmup_end(model)
    model.zero_grad()
    metrics.gae_transfers = gae_log.transfers.tolist()
    if test is not None:
        metrics.set_final(evaluate(model, test))
    return model, metrics


def train_ce(
    model: Model,
    train: Dataset,
    cfg: TrainConfig,
    test: Dataset | None = None,
    on_warmup_end: Callable[[Model], None] | None = None,
    on_epoch_end: Callable[[int, Model], None] | None = None,
) -> tuple[Model, RunMetrics]:
    """Plain minibatch SGD on cross-entropy. Updates ``model`` in place."""
    return _fit(model, train, cfg, False, test, on_warmup_end, on_epoch_end=on_epoch_end)


def train_guided(
    model: Model,
    train: Dataset,
    cfg: TrainConfig,
    test: Dataset | None = None,
    on_warmup_end: Callable[[Model], None] | None = None,
    gae_log: GaeLog | None = None,
    on_attack: Callable[[int, np.ndarray, list[AttackTrace]], None] | None = None,
    on_epoch_end: Callable[[int, Model], None] | None = None,
) -> tuple[Model, RunMetrics]:
    """CE warmup for ``cfg.warmup_epochs``, then CE + lambda * CE on fresh GAEs.

    In each guided minibatch the tail-class members are attacked with the
    current parameters, the accepted GAEs are scored against their original
    labels, and one optimizer step is taken on the summed loss.

    ``gae_log`` collects per-epoch GAE statistics if given. ``on_attack`` is
    called with (epoch, training-set indices, traces) after every attack,
    before the parameter update, so ``model`` still holds the attacked weights.
    """
    return _fit(model, train, cfg, True, test, on_warmup_end, gae_log, on_attack, on_epoch_end)


def ablate_k(
    train: Dataset,
    test: Dataset,
    model_spec: ModelSpec,
    cfg: TrainConfig,
    k_values: Sequence[int],
    seeds: Sequence[int] = (0,),
) -> list[dict]:
    """One guided run per (k, seed), everything else fixed."""
    if not k_values:
        raise ValueError("k_values must be nonempty")
    rows = []
    for k in k_values:
        for seed in seeds:
            run_cfg = replace(cfg, attack=replace(cfg.attack, k=int(k)), seed=seed)
            _, m = train_guided(init_model(model_spec, seed), train, run_cfg, test)
            rows.append({"k": int(k), "seed": seed, "accuracy": m.accuracy, "gae_count": m.gae_count, "metrics": m})
    return rows


def head_tail_recall(per_class: Sequence[float], counts: Sequence[int], rule="below_mean") -> tuple[float, float]:
    """Mean recall over head classes and over tail classes."""
    part = partition_classes(counts, rule)
    acc = np.asarray(per_class)
    head = float(acc[sorted(part.head_classes)].mean()) if part.head_classes else float("nan")
    tail = float(acc[sorted(part.tail_classes)].mean()) if part.tail_classes else float("nan")
    return head, tail
