"""L-infinity PGD with per-step margin traces and crossing-step detection."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from gaeguide.autodiff import NonFiniteError
from gaeguide.models import Model, input_gradient, margins


@dataclass(frozen=True)
class AttackConfig:
    k: int = 3
    alpha: float = 0.025
    epsilon: float = 0.1
    clamp_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "clamp_range", tuple(float(v) for v in self.clamp_range))
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"k must be a positive integer, got {self.k}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.epsilon < self.alpha:
            raise ValueError(f"epsilon ({self.epsilon}) must be >= alpha ({self.alpha})")
        lo, hi = self.clamp_range
        if lo >= hi:
            raise ValueError(f"bad clamp_range {self.clamp_range}")

    @classmethod
    def for_images(cls, k: int = 3) -> AttackConfig:
        return cls(k=k, alpha=2 / 255, epsilon=8 / 255)


@dataclass(frozen=True, eq=False)
class AttackTrace:
    """Iterates x^0..x^T and margins m_0..m_T of one attacked sample.

    ``crossing_step`` is the first t with m_{t-1} > 0 and m_t <= 0, or None.
    Samples the model already gets wrong are marked ``already_crossed`` and
    never stepped.
    """

    true_class: int
    iterates: np.ndarray
    margins: np.ndarray
    crossing_step: int | None
    final_predicted_class: int
    already_crossed: bool = False

    @property
    def steps(self) -> int:
        return len(self.margins) - 1

    @property
    def crossed(self) -> bool:
        return self.crossing_step is not None

    @property
    def x_cross(self) -> np.ndarray:
        if self.crossing_step is None:
            raise ValueError("attack did not cross the boundary")
        return self.iterates[self.crossing_step]

    def to_record(self, sample_id=None) -> dict:
        return {
            "sample_id": int(sample_id) if isinstance(sample_id, np.integer) else sample_id,
            "source_class": int(self.true_class),
            "s": self.crossing_step,
            "final_class": int(self.final_predicted_class),
            "margins": [float(m) for m in self.margins],
        }


def _signed_step(model: Model, x_t: np.ndarray, x_0: np.ndarray, y: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    grad = input_gradient(model, x_t, y, reduction="sum").data
    if not np.isfinite(grad).all():
        raise NonFiniteError("pgd_step gradient")
    x = x_t + cfg.alpha * np.sign(grad)
    x = np.clip(x, x_0 - cfg.epsilon, x_0 + cfg.epsilon)
    return np.clip(x, *cfg.clamp_range)


def pgd_step(model: Model, x_t, x_0, y, cfg: AttackConfig) -> np.ndarray:
    """One signed-gradient ascent step on the CE loss, projected onto the eps-ball and clamp range."""
    x_t = np.asarray(x_t, dtype=np.float64)
    single = x_t.ndim == 1
    x_t2 = x_t.reshape(1, -1) if single else x_t
    x_02 = np.asarray(x_0, dtype=np.float64).reshape(x_t2.shape)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    out = _signed_step(model, x_t2, x_02, y, cfg)
    return out[0] if single else out


def batch_attack(model: Model, x, y, cfg: AttackConfig) -> list[AttackTrace]:
    """Attack every row independently; stops each row at its crossing step.

    Rows are processed together for speed, but every kernel involved is
    row-independent, so the traces equal those of one-at-a-time calls.
    """
    x0 = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if len(y) == 0:
        return []
    if x0.ndim != 2 or len(x0) != len(y):
        raise ValueError(f"x {x0.shape} and y {y.shape} disagree")
    n = len(y)
    m0, pred0 = margins(model, x0, y)
    iterates: list[list[np.ndarray]] = [[x0[i]] for i in range(n)]
    trace_margins: list[list[float]] = [[m0[i]] for i in range(n)]
    final_pred = pred0.copy()
    crossing: list[int | None] = [None] * n
    already = m0 <= 0
    active = np.flatnonzero(~already)
    x_cur = x0.copy()

    for t in range(1, cfg.k + 1):
        if len(active) == 0:
            break
        x_next = _signed_step(model, x_cur[active], x0[active], y[active], cfg)
        m_next, pred_next = margins(model, x_next, y[active])
        x_cur[active] = x_next
        for j, i in enumerate(active):
            iterates[i].append(x_next[j])
            trace_margins[i].append(m_next[j])
            final_pred[i] = pred_next[j]
            if m_next[j] <= 0:
                crossing[i] = t
        active = active[m_next > 0]

    return [
        AttackTrace(
            true_class=int(y[i]),
            iterates=np.stack(iterates[i]),
            margins=np.array(trace_margins[i]),
            crossing_step=crossing[i],
            final_predicted_class=int(final_pred[i]),
            already_crossed=bool(already[i]),
        )
        for i in range(n)
    ]


def attack_with_trace(model: Model, x_0, y: int, cfg: AttackConfig) -> AttackTrace:
    x_0 = np.asarray(x_0, dtype=np.float64).reshape(1, -1)
    return batch_attack(model, x_0, [y], cfg)[0]


def write_traces(path, traces: Iterable[AttackTrace], sample_ids: Iterable | None = None) -> None:
    """Line-delimited JSON, one attacked sample per line."""
    traces = list(traces)
    ids = list(sample_ids) if sample_ids is not None else list(range(len(traces)))
    with open(path, "w") as fh:
        for sid, tr in zip(ids, traces):
            fh.write(json.dumps(tr.to_record(sid), sort_keys=True) + "\n")
