import csv
import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from embracenet.data import SynthConfig, generate_synthetic
from embracenet.errors import ConfigurationError, TrainingError
from embracenet.metrics import segment_metrics
from embracenet.model import Model, ModelConfig, load_checkpoint
from embracenet.tensor import OptimizerState
from embracenet.train import (
    TrainConfig,
    batch_inputs,
    compare_fusions,
    learning_rate,
    sample_batch,
    train_run,
    train_step,
)

TINY = ModelConfig.preset_config("tiny")


def tiny_data(samples=32, seed=0, noise=0.0):
    return generate_synthetic(SynthConfig(samples=samples, window=20, noise=noise), seed)


def quick(**kw):
    base = dict(total_steps=20, eval_interval=10, checkpoint_interval=10, seed=0)
    return TrainConfig(**{**base, **kw})


# -- schedule -----------------------------------------------------------------


def test_full_schedule_values():
    cfg = TrainConfig.full_schedule()
    assert learning_rate(0, cfg) == 1e-4
    assert learning_rate(100_000, cfg) == 5e-5
    assert learning_rate(250_000, cfg) == 2.5e-5
    assert learning_rate(99_999, cfg) == 1e-4


def test_desk_scale_schedule_is_proportional():
    cfg = TrainConfig()
    assert cfg.total_steps / cfg.decay_interval == TrainConfig.full_schedule().total_steps / TrainConfig.full_schedule().decay_interval
    assert learning_rate(1000, cfg) == 5e-5


@given(st.integers(0, 10**6), st.integers(1, 10**5))
def test_schedule_is_non_increasing_and_halves_on_boundaries(step, interval):
    cfg = TrainConfig(decay_interval=interval)
    assume(step // interval < 1000)  # keep lr clear of float underflow
    assert learning_rate(step + 1, cfg) <= learning_rate(step, cfg)
    k = step // interval
    assert learning_rate(k * interval, cfg) == learning_rate((k + 1) * interval, cfg) * 2
    assert learning_rate(step, cfg) == learning_rate(k * interval, cfg)


@pytest.mark.parametrize(
    "kw", [dict(batch_size=0), dict(decay_factor=1.0), dict(lr0=0.0), dict(total_steps=-1), dict(eval_interval=0)]
)
def test_invalid_train_config(kw):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kw).validate()


def test_batch_sampling_is_keyed_by_step():
    cfg = TrainConfig(seed=3)
    a = sample_batch(100, 7, cfg)
    assert a.shape == (8,) and a.min() >= 0 and a.max() < 100
    assert np.array_equal(a, sample_batch(100, 7, cfg))
    assert not np.array_equal(a, sample_batch(100, 8, cfg))


# -- single steps -------------------------------------------------------------


def test_untrained_loss_is_near_log_eight():
    data = generate_synthetic(SynthConfig(samples=8), 0)
    model = Model(ModelConfig.preset_config("base"), 0)
    cfg = TrainConfig()
    idx = np.arange(8)
    loss = train_step(model, OptimizerState.for_store(model.params), batch_inputs(data, idx, "raw", False), data.labels, 0, cfg)
    assert abs(loss - math.log(8)) < 0.5


def test_train_step_zeroes_gradients_and_moves_parameters():
    data = tiny_data(8)
    model = Model(TINY, 0)
    before = model.params.data.copy()
    train_step(model, OptimizerState.for_store(model.params), batch_inputs(data, np.arange(8), "raw", False), data.labels, 0, TrainConfig())
    assert not model.params.grads.any()
    assert not np.array_equal(before, model.params.data)


def test_non_finite_loss_aborts_with_diagnostics():
    data = tiny_data(8)
    data.modalities["gravity"][5, 3, 1] = np.nan
    model = Model(TINY, 0)
    idx = np.arange(8)
    with pytest.raises(TrainingError, match=r"step 4 .*lr=1\.000e-04.*sample 5"):
        train_step(model, OptimizerState.for_store(model.params), batch_inputs(data, idx, "raw", False), data.labels, 4, TrainConfig(), idx)


@pytest.mark.slow
def test_two_sample_memorization():
    data = generate_synthetic(SynthConfig(samples=2), 4)
    result = train_run(TrainConfig(total_steps=200), ModelConfig.preset_config("base"), data)
    assert result.losses[-1] < 0.1


# -- runs ---------------------------------------------------------------------


def test_identical_seeds_identical_traces_and_checkpoints(tmp_path):
    data = tiny_data()
    a = train_run(quick(augment_rotation=True), TINY, data, data, tmp_path / "a")
    b = train_run(quick(augment_rotation=True), TINY, data, data, tmp_path / "b")
    assert a.losses == b.losses
    for name in ("checkpoint-00000000.ckpt", "checkpoint-00000010.ckpt", "checkpoint-00000020.ckpt", "loss.log", "metrics.log"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    c = train_run(quick(seed=1), TINY, data)
    assert c.losses != a.losses


def test_resume_continues_bit_identically(tmp_path):
    data = tiny_data()
    full = train_run(quick(total_steps=30), TINY, data, data, tmp_path / "full")
    resumed = train_run(
        quick(total_steps=30), TINY, data, data, tmp_path / "resumed", resume_from=tmp_path / "full" / "checkpoint-00000010.ckpt"
    )
    assert resumed.losses == full.losses[10:]
    for step in (20, 30):
        name = f"checkpoint-{step:08d}.ckpt"
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "resumed" / name).read_bytes()
    assert load_checkpoint(resumed.checkpoint).step == 30


def test_zero_steps_writes_initial_checkpoint_only(tmp_path):
    result = train_run(quick(total_steps=0), TINY, tiny_data(), tiny_data(8, 1), tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["checkpoint-00000000.ckpt"]
    assert result.losses == [] and result.evaluations == []
    assert load_checkpoint(result.checkpoint).step == 0


def test_eval_interval_beyond_run_gives_one_final_evaluation(tmp_path):
    result = train_run(quick(total_steps=7, eval_interval=100), TINY, tiny_data(), tiny_data(8, 1), tmp_path)
    assert [s for s, _ in result.evaluations] == [7]
    lines = (tmp_path / "metrics.log").read_text().splitlines()
    assert len(lines) == 1 and lines[0].startswith("step=7 lr=") and "acc[Hips]=" in lines[0]
    assert len((tmp_path / "loss.log").read_text().splitlines()) == 7


def test_empty_or_unlabelled_training_set_rejected():
    data = tiny_data(4)
    with pytest.raises(ConfigurationError):
        train_run(quick(), TINY, data.subset([]))
    data.labels = None
    with pytest.raises(ConfigurationError):
        train_run(quick(), TINY, data)


def test_compare_writes_table(tmp_path):
    data = tiny_data()
    out = compare_fusions(quick(total_steps=5), TINY, data, data, tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["fusion_method", "accuracy"]
    assert [r[0] for r in rows[1:]] == ["early", "intermediate", "late", "embrace"]
    for r in rows[1:]:
        assert float(r[1]) == pytest.approx(out[r[0]], abs=1e-6)


@pytest.mark.slow
def test_one_sample_loss_trend_over_seeds():
    # block means of 10 steps; masks are resampled every step so single steps can tick up
    data = tiny_data(1)
    good = 0
    for seed in range(100):
        losses = np.array(train_run(TrainConfig(total_steps=100, lr0=1e-3, seed=seed), TINY, data).losses)
        blocks = losses.reshape(10, 10).mean(axis=1)
        good += bool(np.all(np.diff(blocks) <= 0))
    assert good >= 95


# -- metrics ------------------------------------------------------------------


def test_perfect_predictions():
    labels = np.random.default_rng(0).integers(0, 8, size=(50, 5))
    m = segment_metrics(labels, labels)
    assert m.accuracy == 1.0
    assert np.array_equal(m.confusion, np.diag(np.diag(m.confusion)))
    np.testing.assert_array_equal(m.confusion.sum(axis=1), np.bincount(labels.ravel(), minlength=8))


def test_random_predictor_accuracy():
    rng = np.random.default_rng(1)
    labels = np.repeat(np.arange(8), 1250).reshape(-1, 5)
    m = segment_metrics(rng.integers(0, 8, size=labels.shape), labels)
    assert m.segments == 10_000
    assert abs(m.accuracy - 0.125) < 0.02


@given(st.integers(0, 2**31 - 1))
def test_accuracy_is_confusion_trace_over_total(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 8, size=(20, 5))
    pred = np.where(rng.random(labels.shape) < 0.6, labels, rng.integers(0, 8, size=labels.shape))
    locs = rng.choice(["Bag", "Hand"], size=20)
    m = segment_metrics(pred, labels, locs)
    assert m.accuracy == np.trace(m.confusion) / m.confusion.sum()
    np.testing.assert_array_equal(m.confusion.sum(axis=1), np.bincount(labels.ravel(), minlength=8))
    for loc in ("Bag", "Hand"):
        if (locs == loc).any():
            assert m.per_location[loc] == (pred[locs == loc] == labels[locs == loc]).mean()
