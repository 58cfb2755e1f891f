import math

import numpy as np
import pytest

from src.data.samples import Sample, SynthConfig, generate_synthetic, stack_batch
from src.errors import EmptySplitError
from src.network.builder import ModelConfig, build_model
from src.training.scaler import LossScaler
from src.training.trainer import (
    HISTORY_COLUMNS,
    TrainConfig,
    amp_forward_backward,
    evaluate,
    fit,
    forward_backward,
    load_checkpoint,
    read_history,
    train,
)

SIZE = 16


@pytest.fixture(scope="module")
def samples():
    return generate_synthetic(SynthConfig(count=10, size=SIZE, min_blobs=1, seed=1))


@pytest.fixture
def graph():
    return build_model(ModelConfig(input_size=(SIZE, SIZE)))


def test_one_epoch_of_four_samples_takes_two_steps(graph, samples, tmp_path):
    result = fit(graph, samples[:4], samples[4:6], TrainConfig(epochs=1, batch_size=2), tmp_path)
    assert result.steps == 2
    assert result.optimizer_steps + result.skipped_steps == 2
    assert [r.split for r in result.history] == ["train", "train", "val"]
    assert result.best_step == 2
    assert (tmp_path / "checkpoint" / "model.emb").exists()
    assert (tmp_path / "history.csv").read_text().splitlines()[0] == ",".join(HISTORY_COLUMNS)


def test_validation_cadence(graph, samples):
    result = fit(graph, samples[:6], samples[6:8], TrainConfig(epochs=2, batch_size=2, val_every=2, augment=False))
    val_steps = [r.step for r in result.history if r.split == "val"]
    assert val_steps == [2, 3, 4, 6]


def test_training_is_deterministic(samples):
    cfg = TrainConfig(epochs=1, batch_size=2, seed=5)
    a = build_model(ModelConfig(input_size=(SIZE, SIZE)))
    b = build_model(ModelConfig(input_size=(SIZE, SIZE)))
    ra = fit(a, samples[:4], samples[4:6], cfg)
    rb = fit(b, samples[:4], samples[4:6], cfg)
    assert [r.loss for r in ra.history] == [r.loss for r in rb.history]
    for key in a.params:
        np.testing.assert_array_equal(a.params[key].data, b.params[key].data)


def test_training_changes_parameters(graph, samples):
    before = graph.params["stem.conv.weight"].data.copy()
    fit(graph, samples[:2], samples[2:3], TrainConfig(epochs=1, batch_size=2, augment=False))
    assert not np.array_equal(before, graph.params["stem.conv.weight"].data)


def test_empty_splits_are_rejected(graph, samples):
    with pytest.raises(EmptySplitError):
        fit(graph, [], samples[:1])
    with pytest.raises(EmptySplitError):
        fit(graph, samples[:1], [])


def test_mixed_precision_training(graph, samples, tmp_path):
    cfg = TrainConfig(epochs=1, batch_size=2, amp=True, dynamic_loss_scale=True)
    result = fit(graph, samples[:4], samples[4:6], cfg, tmp_path)
    assert all(math.isfinite(r.loss) for r in result.history)
    _, _, scaler, meta = load_checkpoint(tmp_path / "checkpoint")
    assert scaler is not None and scaler.mode == "dynamic"
    assert meta["train_config"]["amp"] is True


def test_quantization_aware_training(graph, samples, tmp_path):
    cfg = TrainConfig(epochs=1, batch_size=2, qat=True, qat_start_epoch=0)
    fit(graph, samples[:4], samples[4:6], cfg, tmp_path)
    _, _, _, meta = load_checkpoint(tmp_path / "checkpoint")
    assert meta["qat_ranges"]


def test_train_splits_and_reports_test_metrics(graph, samples, tmp_path):
    result = train(graph, samples, TrainConfig(epochs=1, batch_size=4), tmp_path)
    assert result.steps == 2
    assert result.test is not None and result.test.images == 2
    rows = read_history(tmp_path / "history.csv")
    assert rows[-1].split == "test"
    assert len(rows) == len(result.history)


def test_test_augmentation_doubles_the_test_split(graph, samples):
    result = train(graph, samples, TrainConfig(epochs=1, batch_size=4, augment_test=True))
    assert result.test.images == 4


def test_checkpoint_restores_the_best_model(graph, samples, tmp_path):
    fit(graph, samples[:2], samples[2:4], TrainConfig(epochs=1, batch_size=2), tmp_path)
    restored, lion, _, meta = load_checkpoint(tmp_path / "checkpoint")
    assert meta["step"] == 1
    assert lion.step == 1
    for key in graph.params:
        np.testing.assert_array_equal(restored.params[key].data, graph.params[key].data)


def test_evaluate(graph, samples):
    result = evaluate(graph, samples[:3], batch_size=2)
    assert result.images == 3
    assert result.confusion.total == 3 * SIZE * SIZE
    assert 0.0 <= result.mpa <= 1.0


@pytest.mark.parametrize("seed", range(20))
def test_scaled_gradients_match_unscaled_ones(seed):
    toy = build_model(ModelConfig(input_size=(SIZE, SIZE), bottlenecks=1, seed=seed))
    images, masks = stack_batch(generate_synthetic(SynthConfig(count=2, size=SIZE, seed=seed)))

    scaled = amp_forward_backward(toy.copy(), images, masks, LossScaler(init_scale=128.0))
    plain = amp_forward_backward(toy.copy(), images, masks, LossScaler(init_scale=1.0))

    assert not scaled.skipped and not plain.skipped
    assert scaled.grads.keys() == plain.grads.keys()
    for key, grad in plain.grads.items():
        np.testing.assert_array_equal(scaled.grads[key], grad)


def _running_stats(graph):
    return {
        key: tensor.data.copy()
        for key, tensor in graph.params.items()
        if key.endswith(".running_mean") or key.endswith(".running_var")
    }


@pytest.mark.parametrize("amp", [False, True])
def test_skipped_step_leaves_running_stats_alone(amp):
    toy = build_model(ModelConfig(input_size=(SIZE, SIZE), bottlenecks=1, seed=3))
    images, masks = stack_batch(generate_synthetic(SynthConfig(count=2, size=SIZE, seed=3)))
    images[0, 0, 0, 0] = np.inf
    before = _running_stats(toy)
    assert before

    if amp:
        outcome = amp_forward_backward(toy, images, masks, LossScaler(init_scale=128.0))
    else:
        outcome = forward_backward(toy, images, masks)

    assert outcome.skipped
    for key, value in _running_stats(toy).items():
        np.testing.assert_array_equal(value, before[key])


def test_taken_step_reports_running_stats_without_writing_them():
    toy = build_model(ModelConfig(input_size=(SIZE, SIZE), bottlenecks=1, seed=3))
    images, masks = stack_batch(generate_synthetic(SynthConfig(count=2, size=SIZE, seed=3)))
    before = _running_stats(toy)

    outcome = forward_backward(toy, images, masks)

    assert not outcome.skipped
    assert set(outcome.buffers) == set(before)
    for key, value in _running_stats(toy).items():
        np.testing.assert_array_equal(value, before[key])


def test_overflowing_amp_steps_do_not_touch_running_stats(samples):
    toy = build_model(ModelConfig(input_size=(SIZE, SIZE), bottlenecks=1, seed=4))
    hot = [Sample(s.image * 1e6, s.mask, s.id) for s in samples[:4]]
    before = _running_stats(toy)

    result = fit(toy, hot, samples[4:6], TrainConfig(epochs=1, batch_size=2, amp=True, augment=False))

    assert result.skipped_steps == result.steps == 2
    assert result.optimizer_steps == 0
    for key, value in _running_stats(toy).items():
        np.testing.assert_array_equal(value, before[key])


def test_taken_steps_move_running_stats(samples):
    toy = build_model(ModelConfig(input_size=(SIZE, SIZE), bottlenecks=1, seed=4))
    before = _running_stats(toy)
    result = fit(toy, samples[:4], samples[4:6], TrainConfig(epochs=1, batch_size=2, augment=False))
    assert result.optimizer_steps == 2
    after = _running_stats(toy)
    assert any(not np.array_equal(after[key], before[key]) for key in before)
