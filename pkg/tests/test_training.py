"""Loss, optimizer, and training-loop behavior."""

from __future__ import annotations

import math

import numpy as np
import pytest

import spikedriver.autodiff as ad
from spikedriver.autodiff import Tensor
from spikedriver.data import pad_and_mask, synth_generate, truncate, apply_scalers, fit_scalers
from spikedriver.errors import NumericError
from spikedriver.model import CONTROLS, ModelConfig, init_params, named_parameters
from spikedriver.training import (
    TrainConfig,
    _forward_loss,
    adam_step,
    evaluate_mae,
    init_adam,
    loss,
    split_leave_one_out,
    train,
    write_loss_log,
)


def tiny_dataset(steps=60, drivers=2, trips=1, seed=13):
    return [truncate(t, steps) for t in synth_generate(drivers, trips, seed)]


def make_predictions(values):
    return {c: Tensor(values[:, :, i]) for i, c in enumerate(CONTROLS)}


# ---------------------------------------------------------------------------
# Loss


def test_loss_is_sum_of_masked_control_maes():
    rng = np.random.default_rng(0)
    observed = rng.uniform(size=(2, 5, 3))
    predicted = rng.uniform(size=(2, 5, 3))
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=float)
    got = float(loss(make_predictions(predicted), observed, mask).value)
    expected = 0.0
    valid = mask > 0
    for i in range(3):
        diff = np.abs(predicted[:, :, i] - observed[:, :, i])
        expected += diff[valid].sum() / valid.sum()
    assert got == pytest.approx(expected, rel=1e-15)


def test_loss_one_control_off_by_constant():
    observed = np.zeros((3, 7, 3))
    predicted = np.zeros((3, 7, 3))
    predicted[:, :, 0] = 0.1  # brake off by exactly 0.1 everywhere
    mask = np.ones((3, 7))
    got = float(loss(make_predictions(predicted), observed, mask).value)
    assert got == pytest.approx(0.1, rel=1e-15)


def test_loss_rejects_empty_or_misshaped_observations():
    predictions = make_predictions(np.zeros((1, 4, 3)))
    with pytest.raises(ValueError):
        loss(predictions, np.zeros((0, 4, 3)), np.zeros((0, 4)))
    with pytest.raises(ValueError):
        loss(predictions, np.zeros((4, 3)), np.ones((1, 4)))


# ---------------------------------------------------------------------------
# Optimizer


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(beta1=1.0)
    with pytest.raises(ValueError):
        TrainConfig(beta2=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        TrainConfig(grad_clip=0.0)
    with pytest.raises(ValueError):
        TrainConfig(truncation=0)
    assert TrainConfig().grad_clip == 1.0


def test_adam_first_step_moves_by_learning_rate():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.5, -3.0])
    named = [("p", p)]
    adam = init_adam(named)
    config = TrainConfig(learning_rate=1e-2, grad_clip=None)
    adam_step(adam, named, config)
    # bias-corrected first step is lr * g / (|g| + eps) ~ lr * sign(g)
    np.testing.assert_allclose(p.value, [1.0 - 1e-2, -2.0 + 1e-2], rtol=1e-6)


def test_adam_missing_gradient_is_a_noop():
    p = Tensor(np.array([4.0]), requires_grad=True)
    p.grad = None
    named = [("p", p)]
    adam = init_adam(named)
    adam_step(adam, named, TrainConfig(grad_clip=None))
    np.testing.assert_array_equal(p.value, [4.0])
    assert adam.step == 1


def test_adam_rejects_nonfinite_gradient_and_names_the_group():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([np.inf])
    named = [("motor.brake.prop_gain", p)]
    adam = init_adam(named)
    with pytest.raises(NumericError, match="motor.brake.prop_gain"):
        adam_step(adam, named, TrainConfig())


def test_global_norm_clipping_scales_the_moments():
    a = Tensor(np.array([0.0]), requires_grad=True)
    b = Tensor(np.array([0.0]), requires_grad=True)
    a.grad = np.array([3.0])
    b.grad = np.array([4.0])
    named = [("a", a), ("b", b)]
    adam = init_adam(named)
    adam_step(adam, named, TrainConfig(grad_clip=1.0, beta1=0.9))
    # global norm 5 clipped to 1 scales both gradients by 0.2 before the
    # moment update m = (1 - beta1) * g
    assert adam.first["a"][0] == pytest.approx(0.1 * 0.2 * 3.0, rel=1e-12)
    assert adam.first["b"][0] == pytest.approx(0.1 * 0.2 * 4.0, rel=1e-12)


def test_adam_reduces_regression_loss_across_seeds():
    wins = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(16, 3))
        true_w = rng.normal(size=3)
        y = x @ true_w + 0.1 * rng.normal(size=16)
        w = Tensor(np.zeros(3), requires_grad=True)
        named = [("w", w)]
        adam = init_adam(named)
        config = TrainConfig(learning_rate=5e-2, grad_clip=None)

        def mse():
            err = ad.tsum(Tensor(x) * w, axis=1) - Tensor(y)
            return ad.tsum(err * err)

        start = float(mse().value)
        for _ in range(20):
            ad.reset_grads([w])
            total = mse()
            ad.backward(total)
            adam_step(adam, named, config)
        if float(mse().value) < start:
            wins += 1
    assert wins >= 18


# ---------------------------------------------------------------------------
# Truncated backpropagation


def test_truncated_loss_value_equals_full_backprop_loss():
    dataset = tiny_dataset(steps=70)
    scalers = fit_scalers(dataset)
    batch = pad_and_mask(apply_scalers(scalers, dataset))
    config = ModelConfig(threshold=0.3)
    params = init_params(config, sorted({t.driver_id for t in dataset}))

    full = _forward_loss(params, config, batch, batch.outputs, batch.mask, None)
    chunked = _forward_loss(params, config, batch, batch.outputs, batch.mask, 25)
    assert float(full.value) == float(chunked.value)


def test_truncation_stops_gradients_at_window_boundaries():
    dataset = tiny_dataset(steps=70)
    scalers = fit_scalers(dataset)
    batch = pad_and_mask(apply_scalers(scalers, dataset))
    config = ModelConfig(threshold=0.3)
    params = init_params(config, sorted({t.driver_id for t in dataset}))
    named = named_parameters(params)

    ad.reset_grads(t for _, t in named)
    ad.backward(_forward_loss(params, config, batch, batch.outputs, batch.mask, None))
    full_grads = {name: np.array(t.grad, copy=True) for name, t in named if t.grad is not None}

    ad.reset_grads(t for _, t in named)
    ad.backward(_forward_loss(params, config, batch, batch.outputs, batch.mask, 25))
    short_grads = {name: np.array(t.grad, copy=True) for name, t in named if t.grad is not None}

    assert any(
        not np.allclose(full_grads[name], short_grads[name], rtol=1e-9, atol=1e-12)
        for name in full_grads
    )


# ---------------------------------------------------------------------------
# Splits, logs, and the training loop


def test_split_leave_one_out_partitions_by_driver():
    dataset = tiny_dataset(drivers=3, trips=2)
    driver = dataset[0].driver_id
    train_trips, val_trips = split_leave_one_out(dataset, driver)
    assert all(t.driver_id != driver for t in train_trips)
    assert all(t.driver_id == driver for t in val_trips)
    assert len(train_trips) + len(val_trips) == len(dataset)
    with pytest.raises(ValueError, match="unknown driver"):
        split_leave_one_out(dataset, "nobody")


def test_write_loss_log_format(tmp_path):
    path = tmp_path / "loss.csv"
    write_loss_log(path, [(1, 0.5, 0.75), (2, 0.25, 0.5)])
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    assert lines[0] == "epoch,train_loss,val_loss"
    assert len(lines) == 3
    assert text.endswith("\n")
    epoch, train_loss, val_loss = lines[1].split(",")
    assert epoch == "1"
    assert float(train_loss) == 0.5 and float(val_loss) == 0.75
    # full 17-digit round-trip so logs are byte-reproducible
    assert train_loss == "%.17e" % 0.5


def test_train_smoke_and_best_epoch_bookkeeping():
    dataset = tiny_dataset(steps=50)
    result = train(dataset, ModelConfig(), TrainConfig(epochs=4))
    assert len(result.log) == 4
    assert result.diverged_at is None
    # without a holdout the validation column mirrors the training loss
    for _, train_loss, val_loss in result.log:
        assert train_loss == val_loss
    vals = [row[2] for row in result.log]
    assert result.checkpoint.best_epoch == int(np.argmin(vals)) + 1
    assert result.checkpoint.best_val_loss == pytest.approx(min(vals))


def test_train_with_holdout_excludes_driver_from_vocabulary():
    dataset = tiny_dataset(steps=50, drivers=2, trips=2)
    holdout = sorted({t.driver_id for t in dataset})[0]
    result = train(
        dataset, ModelConfig(), TrainConfig(epochs=3, holdout_driver=holdout)
    )
    vocab = result.checkpoint.params.embeddings.vocabulary
    assert holdout not in vocab
    assert len(vocab) == 1
    assert result.checkpoint.holdout == holdout
    # validation is scored on different trips, so it cannot mirror train
    assert any(row[1] != row[2] for row in result.log)


def test_train_rejects_empty_and_single_driver_holdout():
    with pytest.raises(ValueError):
        train([], ModelConfig(), TrainConfig(epochs=1))
    pool = tiny_dataset(drivers=2, trips=2)
    only = pool[0].driver_id
    dataset = [t for t in pool if t.driver_id == only]
    with pytest.raises(ValueError):
        train(dataset, ModelConfig(), TrainConfig(epochs=1, holdout_driver=only))


def test_evaluate_mae_matches_hand_computation():
    dataset = tiny_dataset(steps=40)
    config = ModelConfig()
    params = init_params(config, sorted({t.driver_id for t in dataset}))
    for control in CONTROLS:
        head = params.motors[control]
        head.prop_bias.value[...] = 0.0
        head.prop_gain.value[...] = 0.0
        for weight, bias in head.layers:
            weight.value[...] = 0.0
            bias.value[...] = 0.0
    scalers = fit_scalers(dataset)
    maes = evaluate_mae(params, config, scalers, dataset)
    batch = pad_and_mask(apply_scalers(scalers, dataset))
    valid = batch.mask > 0
    for i, control in enumerate(CONTROLS):
        expected = np.abs(batch.outputs[:, :, i])[valid].mean()
        assert maes[control] == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ValueError):
        evaluate_mae(params, config, scalers, [])
