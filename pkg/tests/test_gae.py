import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gaeguide.attack import AttackConfig, AttackTrace, batch_attack
from gaeguide.data import longtail_counts
from gaeguide.gae import GaeBatch, GaeLog, gae_stats, partition_classes, select_gaes
from gaeguide.models import ModelSpec, init_model

COUNTS = [1000, 599, 359, 215, 129, 77, 46, 28, 17, 10]


def trace(true_class, crossing_step, final_class, k=3, dim=2):
    steps = k if crossing_step is None else crossing_step
    iterates = np.linspace(0.1, 0.2, (steps + 1) * dim).reshape(steps + 1, dim)
    margins = np.r_[np.full(steps, 0.5), [-0.1 if crossing_step else 0.2]]
    return AttackTrace(true_class, iterates, margins, crossing_step, final_class, already_crossed=False)


class TestPartition:
    def test_below_mean(self):
        assert np.mean(COUNTS) == 248.0
        p = partition_classes(COUNTS)
        # 215 < 248, so class 3 is tail as well
        assert p.tail_classes == {3, 4, 5, 6, 7, 8, 9}
        assert p.head_classes == {0, 1, 2}

    def test_balanced_has_no_tail(self):
        assert partition_classes([50] * 10).tail_classes == frozenset()

    def test_bottom_half(self):
        assert partition_classes(COUNTS, "bottom_half").tail_classes == {5, 6, 7, 8, 9}

    def test_bottom_half_ties_prefer_higher_index(self):
        assert partition_classes([5, 5, 5, 5], "bottom_half").tail_classes == {2, 3}

    def test_explicit(self):
        p = partition_classes(COUNTS, [9, 8])
        assert p.tail_classes == {8, 9} and p.rule == "explicit"

    def test_explicit_unknown_class(self):
        with pytest.raises(ValueError, match="12"):
            partition_classes(COUNTS, [3, 12])

    def test_unknown_rule(self):
        with pytest.raises(ValueError):
            partition_classes(COUNTS, "median")

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 40), st.integers(1, 2000), st.sampled_from([1, 0.1, 0.05, 0.02, 0.01]))
    def test_covers_and_matches_mean_rule(self, C, n_max, rho):
        counts = longtail_counts(C, n_max, rho)
        p = partition_classes(counts)
        assert p.tail_classes | p.head_classes == set(range(C))
        assert not p.tail_classes & p.head_classes
        mean = sum(counts) / C
        assert all((counts[i] < mean) == (i in p.tail_classes) for i in range(C))
        if rho == 1:
            assert not p.tail_classes


class TestSelect:
    part = partition_classes(COUNTS)

    def test_failed_attack_excluded(self):
        assert len(select_gaes([trace(9, None, 9)], self.part, COUNTS)) == 0

    def test_tail_to_head_kept_with_tail_label(self):
        tr = trace(9, 2, 0)
        b = select_gaes([tr], self.part, COUNTS)
        assert b.y_tail_prime.tolist() == [9] and b.target_class.tolist() == [0]
        assert b.steps.tolist() == [2]
        assert np.array_equal(b.x_cross[0], tr.iterates[2])

    def test_tail_to_tail_depends_on_rule(self):
        tr = trace(9, 1, 8)
        assert len(select_gaes([tr], self.part, COUNTS, "head_only")) == 0
        assert len(select_gaes([tr], self.part, COUNTS, "greater_count")) == 1

    def test_greater_count_is_strict(self):
        counts = [100, 10, 10]
        part = partition_classes(counts)
        assert len(select_gaes([trace(2, 1, 1)], part, counts, "greater_count")) == 0

    def test_non_tail_source_raises(self):
        with pytest.raises(ValueError):
            select_gaes([trace(0, 1, 1)], self.part, COUNTS)

    def test_unknown_acceptance(self):
        with pytest.raises(ValueError):
            select_gaes([], self.part, COUNTS, "anything")

    def test_empty_keeps_dim(self):
        b = select_gaes([], self.part, COUNTS, dim=5)
        assert b.x_cross.shape == (0, 5) and len(b) == 0

    def test_idempotent(self):
        traces = [trace(9, 2, 0), trace(7, 1, 8), trace(5, None, 5), trace(6, 3, 2)]
        first = select_gaes(traces, self.part, COUNTS)
        # rebuild traces from the kept examples and filter again
        again = [
            AttackTrace(int(s), np.stack([x, x]), np.array([0.3, -0.1]), 1, int(t), False)
            for x, s, t in zip(first.x_cross, first.source_class, first.target_class)
        ]
        second = select_gaes(again, self.part, COUNTS)
        assert np.array_equal(first.x_cross, second.x_cross)
        assert np.array_equal(first.source_class, second.source_class)
        assert np.array_equal(first.target_class, second.target_class)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 5000), st.integers(1, 5), st.sampled_from(["head_only", "greater_count"]))
def test_batch_invariants_on_real_attacks(seed, k, rule):
    rng = np.random.default_rng(seed)
    model = init_model(ModelSpec(2, 10, (16,)), seed)
    part = partition_classes(COUNTS)
    tail = sorted(part.tail_classes)
    y = rng.choice(tail, size=40)
    x = rng.random((40, 2))
    cfg = AttackConfig(k=k, alpha=0.05, epsilon=0.2)
    b = select_gaes(batch_attack(model, x, y, cfg), part, COUNTS, rule, dim=2)
    counts = np.array(COUNTS)
    assert all(s in part.tail_classes for s in b.source_class.tolist())
    assert (counts[b.target_class] > counts[b.source_class]).all()
    assert (b.steps <= k).all() and (b.steps >= 1).all()
    assert np.array_equal(b.y_tail_prime, b.source_class)
    if rule == "head_only":
        assert all(t in part.head_classes for t in b.target_class.tolist())


class TestStats:
    def test_empty(self):
        s = gae_stats(GaeBatch.empty(2), epoch=3, num_classes=4)
        assert s.count == 0 and s.to_record()["source_class_histogram"] == [0, 0, 0, 0]

    def test_histograms(self):
        part = partition_classes(COUNTS)
        b = select_gaes([trace(9, 2, 0), trace(9, 1, 1), trace(4, 1, 0)], part, COUNTS)
        rec = gae_stats(b, 7, 10).to_record()
        assert rec["epoch"] == 7 and rec["count"] == 3
        assert rec["source_class_histogram"][9] == 2 and rec["source_class_histogram"][4] == 1
        assert rec["target_class_histogram"][:2] == [2, 1]

    def test_log_accumulates_per_epoch(self):
        part = partition_classes(COUNTS)
        log = GaeLog(10)
        log.start_epoch(0)
        log.add(select_gaes([trace(9, 2, 0)], part, COUNTS))
        log.add(select_gaes([trace(8, 1, 0)], part, COUNTS))
        log.start_epoch(1)
        log.add(GaeBatch.empty(2))
        assert log.counts == [2, 0]
        assert log.transfers[9, 0] == 1 and log.transfers[8, 0] == 1
