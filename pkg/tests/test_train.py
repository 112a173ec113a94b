import numpy as np
import pytest

from gaeguide.attack import AttackConfig
from gaeguide.data import Dataset, LongTailSpec, synth_gaussians
from gaeguide.models import Model, ModelSpec, init_model
from gaeguide.train import (
    RunMetrics,
    TrainConfig,
    TrainingDivergedError,
    ablate_k,
    evaluate,
    head_tail_recall,
    train_ce,
    train_guided,
)


def params_bytes(model):
    return [p.data.tobytes() for p in model.params]


def snapshotting_run(fn, model, data, cfg):
    """Train and return the parameter bytes after every epoch."""
    snaps = []
    for e in range(1, cfg.epochs + 1):
        step_cfg = TrainConfig(**{**cfg.to_dict(), "epochs": e, "warmup_epochs": min(cfg.warmup_epochs, e)})
        m = init_model(model, cfg.seed)
        fn(m, data, step_cfg)
        snaps.append(params_bytes(m))
    return snaps


@pytest.fixture(scope="module")
def small_lt():
    return synth_gaussians(LongTailSpec(4, 120, 0.05), seed=0, sigma=0.04, layout="interleaved")


class TestConfig:
    def test_default_warmup_is_half(self):
        assert TrainConfig(epochs=9).warmup_epochs == 4

    @pytest.mark.parametrize(
        "kw", [dict(epochs=3, warmup_epochs=4), dict(lambda_cross=-1), dict(lr_schedule="cosine"), dict(batch_size=0)]
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_step_schedule(self):
        cfg = TrainConfig(learning_rate=0.1, lr_schedule="step", lr_decay_epochs=(2, 4), lr_decay_factor=0.5)
        assert [cfg.lr_at(e) for e in range(5)] == [0.1, 0.1, 0.05, 0.05, 0.025]

    def test_dict_round_trip(self):
        cfg = TrainConfig(epochs=5, attack=AttackConfig(k=2), partition_rule=(3, 2), lr_decay_epochs=[1])
        assert TrainConfig(**cfg.to_dict()) == cfg


class TestEvaluate:
    def test_perfect_model(self):
        x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.1], [0.1, 1.0]])
        y = np.array([0, 1, 0, 1])
        m = evaluate(Model.logistic([10.0, -10.0]), Dataset(x, y, 2))
        assert m.accuracy == 1.0 and m.confusion == [[2, 0], [0, 2]]

    def test_constant_prediction(self):
        model = init_model(ModelSpec(2, 4), 0)
        for p in model.params:
            p.data = np.zeros_like(p.data)
        model.params[1].data = np.array([0.0, 0.0, 5.0, 0.0])
        test = synth_gaussians(LongTailSpec(4, 25, 1.0), seed=0)
        m = evaluate(model, test)
        assert m.accuracy == 0.25
        assert m.per_class_accuracy == [0.0, 0.0, 1.0, 0.0]
        assert [sum(r) for r in m.confusion] == [25] * 4

    def test_accuracy_is_trace_over_total(self, small_lt):
        model = init_model(ModelSpec(2, 4, (8,)), 1)
        m = evaluate(model, small_lt)
        conf = np.array(m.confusion)
        assert m.accuracy == np.trace(conf) / conf.sum()
        assert [sum(r) for r in m.confusion] == small_lt.counts


class TestReductions:
    spec = ModelSpec(2, 4, (8,))

    def test_lambda_zero_matches_ce(self, small_lt):
        cfg = TrainConfig(epochs=4, batch_size=16, lambda_cross=0.0, seed=3)
        a, _ = train_ce(init_model(self.spec, 3), small_lt, cfg)
        b, mb = train_guided(init_model(self.spec, 3), small_lt, cfg)
        assert params_bytes(a) == params_bytes(b)
        assert mb.phase[-1] == "guided"

    def test_lambda_zero_trajectory(self, small_lt):
        cfg = TrainConfig(epochs=3, batch_size=16, lambda_cross=0.0, seed=1)
        assert snapshotting_run(train_ce, self.spec, small_lt, cfg) == snapshotting_run(
            train_guided, self.spec, small_lt, cfg
        )

    def test_balanced_has_no_gaes_and_matches_ce(self):
        data = synth_gaussians(LongTailSpec(4, 40, 1.0), seed=2)
        cfg = TrainConfig(epochs=4, batch_size=16, seed=2)
        a, ma = train_ce(init_model(self.spec, 2), data, cfg)
        b, mb = train_guided(init_model(self.spec, 2), data, cfg)
        assert params_bytes(a) == params_bytes(b)
        assert mb.gae_count == [0, 0, 0, 0]
        assert ma.train_loss == mb.train_loss

    def test_zero_epochs_leaves_model(self, small_lt):
        model = init_model(self.spec, 0)
        before = params_bytes(model)
        train_guided(model, small_lt, TrainConfig(epochs=0))
        assert params_bytes(model) == before


def test_guided_run_is_deterministic(small_lt):
    cfg = TrainConfig(epochs=4, batch_size=16, seed=5, attack=AttackConfig(k=3, alpha=0.01, epsilon=0.1))
    runs = [train_guided(init_model(ModelSpec(2, 4, (8,)), 5), small_lt, cfg, small_lt) for _ in range(2)]
    assert params_bytes(runs[0][0]) == params_bytes(runs[1][0])
    assert runs[0][1].to_dict() == runs[1][1].to_dict()


def test_warmup_hook_sees_warmup_params(small_lt):
    seen = []
    cfg = TrainConfig(epochs=4, warmup_epochs=2, batch_size=16, seed=0)
    train_guided(init_model(ModelSpec(2, 4, (8,)), 0), small_lt, cfg, on_warmup_end=lambda m: seen.append(params_bytes(m)))
    ref, _ = train_ce(init_model(ModelSpec(2, 4, (8,)), 0), small_lt, TrainConfig(epochs=2, warmup_epochs=2, batch_size=16))
    assert seen == [params_bytes(ref)]


def test_divergence_names_epoch(small_lt):
    cfg = TrainConfig(epochs=5, learning_rate=1e200, momentum=0.0, batch_size=16)
    with pytest.raises(TrainingDivergedError) as exc:
        train_ce(init_model(ModelSpec(2, 4, (8,)), 0), small_lt, cfg)
    assert "epoch" in str(exc.value) and 0 <= exc.value.epoch < 5


def test_empty_training_set():
    with pytest.raises(ValueError):
        train_ce(init_model(ModelSpec(2, 2), 0), Dataset(np.zeros((0, 2)), np.zeros(0, int), 2), TrainConfig())


def test_two_class_balanced_learns():
    means = [[0.3, 0.5], [0.7, 0.5]]
    train = synth_gaussians(LongTailSpec(2, 300, 1.0), seed=0, means=means, sigma=0.05)
    test = synth_gaussians(LongTailSpec(2, 500, 1.0), seed=1, means=means, sigma=0.05)
    _, m = train_ce(init_model(ModelSpec(2, 2, (16,)), 0), train, TrainConfig(epochs=20, batch_size=32), test)
    assert m.accuracy > 0.95


def test_ce_recall_drops_from_head_to_tail():
    train = synth_gaussians(LongTailSpec(10, 1000, 0.01), seed=0, sigma=0.04, layout="interleaved")
    test = synth_gaussians(LongTailSpec(10, 200, 1.0), seed=1, sigma=0.04, layout="interleaved")
    _, m = train_ce(init_model(ModelSpec(2, 10, (64,)), 0), train, TrainConfig(epochs=20), test)
    head, tail = head_tail_recall(m.per_class_accuracy, train.counts)
    assert head > tail


def test_metrics_round_trip(small_lt):
    _, m = train_guided(init_model(ModelSpec(2, 4, (8,)), 0), small_lt, TrainConfig(epochs=2, batch_size=32), small_lt)
    assert RunMetrics.from_dict(m.to_dict()) == m
    assert all(0.0 <= a <= 1.0 for a in m.per_class_accuracy)


def test_ablate_single_k(small_lt):
    rows = ablate_k(small_lt, small_lt, ModelSpec(2, 4, (8,)), TrainConfig(epochs=2, batch_size=32), [3])
    assert len(rows) == 1 and rows[0]["k"] == 3 and len(rows[0]["gae_count"]) == 2
    with pytest.raises(ValueError):
        ablate_k(small_lt, small_lt, ModelSpec(2, 4, (8,)), TrainConfig(), [])


def test_head_tail_recall():
    head, tail = head_tail_recall([1.0, 0.8, 0.2, 0.0], [100, 50, 10, 5])
    assert head == pytest.approx(0.9) and tail == pytest.approx(0.1)
