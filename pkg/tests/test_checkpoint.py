"""Checkpoint save/load: exact round-trips and corruption handling."""

from __future__ import annotations

import math

import numpy as np
import pytest

from spikedriver.checkpoint import (
    Checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from spikedriver.data import apply_scalers, fit_scalers, pad_and_mask, synth_generate, truncate
from spikedriver.errors import CheckpointError
from spikedriver.model import (
    CONTROLS,
    ModelConfig,
    forward_batch,
    init_params,
    named_parameters,
)
from spikedriver.training import TrainConfig, train


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    dataset = [truncate(t, 40) for t in synth_generate(2, 1, 21)]
    result = train(dataset, ModelConfig(), TrainConfig(epochs=2))
    path = tmp_path_factory.mktemp("ckpt") / "model.ckpt"
    save_checkpoint(path, result.checkpoint)
    return dataset, result.checkpoint, path


def test_round_trip_is_bit_exact(trained):
    dataset, ckpt, path = trained
    loaded = load_checkpoint(path)

    assert loaded.config == ckpt.config
    assert loaded.best_epoch == ckpt.best_epoch
    assert loaded.best_val_loss == ckpt.best_val_loss
    assert loaded.holdout == ckpt.holdout
    for field in ("input_mean", "input_std", "output_min", "output_max"):
        np.testing.assert_array_equal(
            getattr(loaded.scalers, field), getattr(ckpt.scalers, field)
        )
    assert loaded.params.embeddings.vocabulary == ckpt.params.embeddings.vocabulary
    for (name, a), (_, b) in zip(
        named_parameters(ckpt.params), named_parameters(loaded.params)
    ):
        np.testing.assert_array_equal(a.value, b.value, err_msg=name)

    batch = pad_and_mask(apply_scalers(ckpt.scalers, dataset))
    mine = forward_batch(ckpt.params, ckpt.config, batch.inputs, batch.driver_ids)
    theirs = forward_batch(loaded.params, loaded.config, batch.inputs, batch.driver_ids)
    for control in CONTROLS:
        np.testing.assert_array_equal(
            mine.predictions[control].value, theirs.predictions[control].value
        )


def test_save_is_byte_deterministic(trained, tmp_path):
    _, ckpt, path = trained
    again = tmp_path / "again.ckpt"
    save_checkpoint(again, ckpt)
    assert again.read_bytes() == path.read_bytes()
    # loading and re-saving must also reproduce the same bytes
    resaved = tmp_path / "resaved.ckpt"
    save_checkpoint(resaved, load_checkpoint(path))
    assert resaved.read_bytes() == path.read_bytes()


def test_holdout_marker_round_trips(tmp_path):
    dataset = [truncate(t, 30) for t in synth_generate(2, 2, 3)]
    holdout = sorted({t.driver_id for t in dataset})[1]
    result = train(
        dataset, ModelConfig(), TrainConfig(epochs=1, holdout_driver=holdout)
    )
    path = tmp_path / "holdout.ckpt"
    save_checkpoint(path, result.checkpoint)
    assert load_checkpoint(path).holdout == holdout


def test_nan_validation_loss_round_trips(trained, tmp_path):
    _, ckpt, _ = trained
    broken = Checkpoint(
        config=ckpt.config,
        scalers=ckpt.scalers,
        params=ckpt.params,
        best_epoch=0,
        best_val_loss=math.nan,
    )
    path = tmp_path / "nan.ckpt"
    save_checkpoint(path, broken)
    assert math.isnan(load_checkpoint(path).best_val_loss)


def test_newline_in_driver_id_is_rejected(tmp_path):
    config = ModelConfig()
    params = init_params(config, ["good", "bad\nactor"])
    scalers = fit_scalers([truncate(t, 30) for t in synth_generate(2, 1, 5)])
    ckpt = Checkpoint(
        config=config, scalers=scalers, params=params, best_epoch=1, best_val_loss=0.5
    )
    with pytest.raises(CheckpointError, match="newline"):
        save_checkpoint(tmp_path / "bad.ckpt", ckpt)


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda lines: ["not-a-checkpoint v1"] + lines[1:], "expected"),
        (lambda lines: lines[:10], "truncated"),
        (lambda lines: [l.replace("[scalers]", "[scalrs]", 1) for l in lines], "expected"),
    ],
)
def test_structural_corruption_is_reported(trained, tmp_path, mutate, message):
    _, _, path = trained
    lines = path.read_text(encoding="utf-8").splitlines()
    bad = tmp_path / "corrupt.ckpt"
    bad.write_text("\n".join(mutate(lines)) + "\n", encoding="utf-8")
    with pytest.raises(CheckpointError, match=message):
        load_checkpoint(bad)


def test_numeric_corruption_is_reported(trained, tmp_path):
    _, _, path = trained
    text = path.read_text(encoding="utf-8")
    bad = tmp_path / "garbled.ckpt"
    # damage one parameter payload value
    lines = text.splitlines()
    for i, line in enumerate(lines):
        if line.startswith("perception.expand_weight "):
            payload = lines[i + 1].split()
            payload[3] = "他"
            lines[i + 1] = " ".join(payload)
            break
    bad.write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)


def test_shape_mismatch_is_reported(trained, tmp_path):
    _, _, path = trained
    lines = path.read_text(encoding="utf-8").splitlines()
    for i, line in enumerate(lines):
        if line.startswith("accumulator.bias "):
            lines[i] = "accumulator.bias 1 44"
            break
    bad = tmp_path / "shape.ckpt"
    bad.write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(bad)


def test_unknown_parameter_is_reported(trained, tmp_path):
    _, _, path = trained
    lines = path.read_text(encoding="utf-8").splitlines()
    for i, line in enumerate(lines):
        if line.startswith("accumulator.bias "):
            lines[i] = "accumulator.bases 1 45"
            break
    bad = tmp_path / "name.ckpt"
    bad.write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(CheckpointError, match="unknown parameter"):
        load_checkpoint(bad)
