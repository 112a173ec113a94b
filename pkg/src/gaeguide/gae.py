"""Selection of guiding adversarial examples from attack traces.

A trace becomes a guiding example when its source sample belongs to a tail
class, the attack crossed the decision boundary within k steps, and it landed
in a more frequent class. The example keeps its original (tail) label.

Which classes count as "tail" is not pinned down anywhere authoritative; the
``below_mean`` rule is the default and ``bottom_half`` / explicit lists are
available for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from gaeguide.attack import AttackTrace

PARTITION_RULES = ("below_mean", "bottom_half")
ACCEPTANCE_RULES = ("head_only", "greater_count")


@dataclass(frozen=True)
class ClassPartition:
    tail_classes: frozenset[int]
    head_classes: frozenset[int]
    rule: str

    @property
    def num_classes(self) -> int:
        return len(self.tail_classes) + len(self.head_classes)


def partition_classes(counts: Sequence[int], rule="below_mean") -> ClassPartition:
    """Split classes into head and tail by training counts.

    ``rule`` is ``"below_mean"`` (tail iff count < mean count), ``"bottom_half"``
    (the C // 2 least frequent classes, higher index first on ties) or an
    explicit iterable of tail class indices.
    """
    counts = np.asarray(counts)
    C = len(counts)
    if isinstance(rule, str):
        if rule == "below_mean":
            # compare n_i * C < sum(n) to stay in exact integer arithmetic
            tail = {i for i in range(C) if counts[i] * C < counts.sum()}
        elif rule == "bottom_half":
            order = sorted(range(C), key=lambda i: (counts[i], -i))
            tail = set(order[: C // 2])
        else:
            raise ValueError(f"unknown partition rule {rule!r}; expected one of {PARTITION_RULES} or a list")
        name = rule
    else:
        tail = {int(i) for i in rule}
        unknown = sorted(i for i in tail if not 0 <= i < C)
        if unknown:
            raise ValueError(f"explicit tail list references unknown classes {unknown}")
        name = "explicit"
    return ClassPartition(frozenset(tail), frozenset(range(C)) - frozenset(tail), name)


@dataclass(eq=False)
class GaeBatch:
    x_cross: np.ndarray
    y_tail_prime: np.ndarray
    source_class: np.ndarray
    target_class: np.ndarray
    steps: np.ndarray

    def __len__(self) -> int:
        return len(self.y_tail_prime)

    @classmethod
    def empty(cls, dim: int) -> GaeBatch:
        z = np.zeros(0, dtype=np.int64)
        return cls(np.zeros((0, dim)), z, z.copy(), z.copy(), z.copy())


def select_gaes(
    traces: Sequence[AttackTrace],
    partition: ClassPartition,
    counts: Sequence[int],
    acceptance: str = "head_only",
    dim: int | None = None,
) -> GaeBatch:
    """Keep crossed traces whose landing class is frequent enough.

    ``acceptance="head_only"`` requires the landing class to be a head class;
    ``"greater_count"`` only requires a strictly larger training count than the
    source class.
    """
    if acceptance not in ACCEPTANCE_RULES:
        raise ValueError(f"unknown acceptance rule {acceptance!r}")
    kept = []
    for tr in traces:
        if tr.true_class not in partition.tail_classes:
            raise ValueError(f"trace from class {tr.true_class}, which is not a tail class")
        if tr.crossing_step is None:
            continue
        target = tr.final_predicted_class
        if acceptance == "head_only":
            ok = target in partition.head_classes
        else:
            ok = counts[target] > counts[tr.true_class]
        if ok:
            kept.append(tr)
    if not kept:
        if dim is None:
            dim = traces[0].iterates.shape[1] if traces else 0
        return GaeBatch.empty(dim)
    return GaeBatch(
        x_cross=np.stack([tr.x_cross for tr in kept]),
        y_tail_prime=np.array([tr.true_class for tr in kept], dtype=np.int64),
        source_class=np.array([tr.true_class for tr in kept], dtype=np.int64),
        target_class=np.array([tr.final_predicted_class for tr in kept], dtype=np.int64),
        steps=np.array([tr.crossing_step for tr in kept], dtype=np.int64),
    )


@dataclass
class GaeStats:
    epoch: int
    count: int
    transfers: np.ndarray  # [source, target] counts

    @property
    def source_histogram(self) -> list[int]:
        return self.transfers.sum(axis=1).tolist()

    @property
    def target_histogram(self) -> list[int]:
        return self.transfers.sum(axis=0).tolist()

    def to_record(self) -> dict:
        return {
            "epoch": self.epoch,
            "count": self.count,
            "source_class_histogram": self.source_histogram,
            "target_class_histogram": self.target_histogram,
        }


def gae_stats(batch: GaeBatch, epoch: int, num_classes: int) -> GaeStats:
    transfers = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(transfers, (batch.source_class, batch.target_class), 1)
    return GaeStats(epoch, len(batch), transfers)


@dataclass
class GaeLog:
    """Per-epoch GAE counts accumulated over minibatches."""

    num_classes: int
    epochs: list[GaeStats] = field(default_factory=list)

    def start_epoch(self, epoch: int) -> None:
        self.epochs.append(GaeStats(epoch, 0, np.zeros((self.num_classes, self.num_classes), dtype=np.int64)))

    def add(self, batch: GaeBatch) -> None:
        stats = gae_stats(batch, self.epochs[-1].epoch, self.num_classes)
        self.epochs[-1].count += stats.count
        self.epochs[-1].transfers += stats.transfers

    @property
    def counts(self) -> list[int]:
        return [e.count for e in self.epochs]

    @property
    def transfers(self) -> np.ndarray:
        total = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        for e in self.epochs:
            total += e.transfers
        return total
