"""End-to-end forward-pass behavior of the assembled model."""

from __future__ import annotations

import numpy as np
import pytest

import spikedriver.autodiff as ad
from spikedriver import accumulator, motor, perception, personalization
from spikedriver.data import synth_generate, truncate
from spikedriver.errors import DatasetError
from spikedriver.model import (
    CONTROLS,
    ModelConfig,
    count_params,
    detach_params,
    forward_batch,
    forward_trip,
    init_params,
    init_state,
    named_parameters,
    restore_state,
    snapshot_state,
)


def small_fixture(steps=80, trips=2, seed=11):
    """A couple of short real trips plus inputs/ids ready for the model."""
    raw = synth_generate(2, 1, seed)[:trips]
    clipped = [truncate(t, steps) for t in raw]
    inputs = np.stack([t.inputs for t in clipped], axis=0)
    ids = [t.driver_id for t in clipped]
    return inputs, ids


def zero_motor_head(params, control):
    head = params.motors[control]
    head.prop_bias.value[...] = 0.0
    head.prop_gain.value[...] = 0.0
    for weight, bias in head.layers:
        weight.value[...] = 0.0
        bias.value[...] = 0.0


# ---------------------------------------------------------------------------
# Configuration and initialization


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(channels=0),
        dict(expand_factor=0),
        dict(compress_factor=-1),
        dict(embed_width=0),
        dict(dt=0.0),
        dict(threshold=-1.0),
        dict(sharpness=0.0),
        dict(primitive_floor=0.0),
        dict(motor_hidden=(4, 0)),
    ],
)
def test_config_rejects_bad_values(kwargs):
    with pytest.raises(ValueError):
        ModelConfig(**kwargs)


def test_config_derived_sizes():
    config = ModelConfig()
    assert config.n_features == 45
    assert config.motor_hidden == (9, 9)
    wide = ModelConfig(channels=4, compress_factor=3, motor_hidden=(6,))
    assert wide.n_features == 12
    assert wide.motor_hidden == (6,)


def test_init_is_seed_deterministic():
    drivers = ["a", "b", "c"]
    one = init_params(ModelConfig(seed=5), drivers)
    two = init_params(ModelConfig(seed=5), drivers)
    other = init_params(ModelConfig(seed=6), drivers)
    for (name, t1), (_, t2), (_, t3) in zip(
        named_parameters(one), named_parameters(two), named_parameters(other)
    ):
        np.testing.assert_array_equal(t1.value, t2.value, err_msg=name)
    assert any(
        not np.array_equal(t1.value, t3.value)
        for (_, t1), (_, t3) in zip(named_parameters(one), named_parameters(other))
    )


def test_named_parameters_order_and_coverage():
    params = init_params(ModelConfig(), ["a", "b"])
    names = [name for name, _ in named_parameters(params)]
    expected_prefix = [
        "perception.expand_weight",
        "perception.expand_bias",
        "perception.compress_weight",
        "perception.compress_bias",
        "embeddings.rows",
        "personalization.weight",
        "personalization.bias",
        "accumulator.leak_raw",
        "accumulator.bias",
        "accumulator.gain",
        "accumulator.reset_value",
    ]
    assert names[: len(expected_prefix)] == expected_prefix
    for control in CONTROLS:
        assert f"motor.{control}.prop_bias" in names
        assert f"motor.{control}.layer0.weight" in names
        assert f"motor.{control}.layer2.bias" in names
    assert len(names) == len(set(names))
    assert all(t.requires_grad for _, t in named_parameters(params))


def test_perception_parameter_count():
    params = init_params(ModelConfig(), ["a"])
    perception_sizes = sum(
        t.value.size
        for name, t in named_parameters(params)
        if name.startswith("perception.")
    )
    # 9 -> 63 (567 + 63) plus 63 -> 45 (2835 + 45)
    assert perception_sizes == 3510


def test_default_parameter_budget():
    drivers = [f"driver_{i}" for i in range(25)]
    params = init_params(ModelConfig(), drivers)
    total = count_params(params)
    # perception 3510, embeddings 25*10, blend (45x55 + 45), accumulator
    # 4*45, and three motor heads of 605 each
    assert total == 3510 + 250 + 2520 + 180 + 3 * 605
    assert 6000 <= total <= 14000


# ---------------------------------------------------------------------------
# Forward-pass contracts


def test_forward_rejects_bad_inputs():
    params = init_params(ModelConfig(), ["a"])
    config = ModelConfig()
    with pytest.raises(DatasetError):
        forward_batch(params, config, np.zeros((5, 9)), ["a"])
    with pytest.raises(DatasetError):
        forward_batch(params, config, np.zeros((1, 5, 7)), ["a"])
    with pytest.raises(DatasetError):
        forward_batch(params, config, np.zeros((2, 5, 9)), ["a"])


def test_forward_is_deterministic():
    inputs, ids = small_fixture()
    config = ModelConfig()
    params = init_params(config, ids)
    first = forward_batch(params, config, inputs, ids)
    second = forward_batch(params, config, inputs, ids)
    for control in CONTROLS:
        np.testing.assert_array_equal(
            first.predictions[control].value, second.predictions[control].value
        )


def test_zeroed_motor_heads_predict_exactly_zero():
    inputs, ids = small_fixture()
    config = ModelConfig(threshold=0.3)  # fire often to exercise launches
    params = init_params(config, ids)
    for control in CONTROLS:
        zero_motor_head(params, control)
    result = forward_batch(params, config, inputs, ids)
    for control in CONTROLS:
        assert np.all(result.predictions[control].value == 0.0)


def test_controls_are_isolated():
    inputs, ids = small_fixture()
    config = ModelConfig(threshold=0.3)
    baseline = init_params(config, ids)
    reference = forward_batch(baseline, config, inputs, ids)

    silenced = init_params(config, ids)
    zero_motor_head(silenced, "brake")
    result = forward_batch(silenced, config, inputs, ids)
    assert np.all(result.predictions["brake"].value == 0.0)
    for control in ("throttle", "steer"):
        np.testing.assert_array_equal(
            result.predictions[control].value, reference.predictions[control].value
        )


def test_forward_matches_stepwise_reference():
    """The batched loop with amortized pool sweeping and the fused
    launch-value node must agree with a naive per-step reference that
    sweeps every step, launches, and then re-evaluates the whole pool."""
    inputs, ids = small_fixture(steps=100)
    config = ModelConfig(threshold=0.3)
    params = init_params(config, ids)

    n_lanes, n_steps, _ = inputs.shape
    state = init_state(config, lanes=n_lanes)
    acc_state = state.accumulator
    pools = dict(state.motors)
    embedding = personalization.lookup_batch(params.embeddings, ids)
    leak = accumulator.effective_leak(params.accumulator)
    rates = {c: ad.exp(params.motors[c].rate_raw) for c in CONTROLS}
    reference = {c: [] for c in CONTROLS}
    for t in range(n_steps):
        now = t * config.dt
        x_t = ad.Tensor(inputs[:, t, :])
        features = perception.perceive(params.perception, x_t)
        body = personalization.personalize(params.personalization, features, embedding)
        acc_state, spikes = accumulator.step(
            params.accumulator,
            acc_state,
            body,
            config.dt,
            threshold=config.threshold,
            sharpness=config.sharpness,
            leak=leak,
        )
        fired_lanes = (spikes.value > 0.5).any(axis=1)
        for control in CONTROLS:
            pool = motor.compact(pools[control], now)
            if fired_lanes.any():
                head = params.motors[control]
                target = motor.compress(head, motor.gated_proposals(head, body, spikes))
                start = motor.evaluate(pool, now)
                pool = motor.trigger(
                    pool, target, now, head,
                    lanes=fired_lanes, start_value=start, rate=rates[control],
                )
            pools[control] = pool
            reference[control].append(motor.evaluate(pool, now).value)

    result = forward_batch(params, config, inputs, ids)
    for control in CONTROLS:
        expected = np.stack(reference[control], axis=1)
        np.testing.assert_allclose(
            result.predictions[control].value, expected, atol=1e-12, rtol=0.0
        )


def test_padding_steps_leave_prefix_unchanged():
    inputs, ids = small_fixture()
    config = ModelConfig(threshold=0.3)
    params = init_params(config, ids)
    short = forward_batch(params, config, inputs, ids)
    padded = np.concatenate([inputs, np.zeros((2, 50, 9))], axis=1)
    long = forward_batch(params, config, padded, ids)
    for control in CONTROLS:
        np.testing.assert_array_equal(
            long.predictions[control].value[:, : inputs.shape[1]],
            short.predictions[control].value,
        )


def test_future_inputs_cannot_affect_past_outputs():
    inputs, ids = small_fixture()
    config = ModelConfig(threshold=0.3)
    params = init_params(config, ids)
    cut = inputs.shape[1] // 2
    scrambled = inputs.copy()
    scrambled[:, cut:, :] += np.random.default_rng(3).normal(
        0.0, 1.0, scrambled[:, cut:, :].shape
    )
    base = forward_batch(params, config, inputs, ids)
    other = forward_batch(params, config, scrambled, ids)
    for control in CONTROLS:
        np.testing.assert_array_equal(
            base.predictions[control].value[:, :cut],
            other.predictions[control].value[:, :cut],
        )


def test_snapshot_restore_replays_exactly():
    inputs, ids = small_fixture(steps=90)
    config = ModelConfig(threshold=0.3)
    params = init_params(config, ids)
    cut = 40
    full = forward_batch(params, config, inputs, ids)

    head = forward_batch(params, config, inputs[:, :cut, :], ids)
    resumed_state = restore_state(snapshot_state(head.state))
    tail = forward_batch(
        params, config, inputs[:, cut:, :], ids, state=resumed_state
    )
    for control in CONTROLS:
        np.testing.assert_array_equal(
            tail.predictions[control].value,
            full.predictions[control].value[:, cut:],
        )


def test_trace_records_potentials_spikes_and_launches():
    inputs, ids = small_fixture(steps=60)
    config = ModelConfig(threshold=0.3)
    params = init_params(config, ids)
    plain = forward_batch(params, config, inputs, ids)
    assert plain.trace is None

    result = forward_batch(params, config, inputs, ids, record=True)
    trace = result.trace
    assert trace.potentials.shape == (60, 2, config.n_features)
    assert trace.spikes.shape == (60, 2, config.n_features)
    assert set(np.unique(trace.spikes)) <= {0.0, 1.0}
    assert trace.triggers, "dense firing must produce launch events"
    for event in trace.triggers:
        assert event.control in CONTROLS
        assert event.time == pytest.approx(event.step * config.dt)
        assert event.lanes.shape == (2,)
        assert event.targets.shape == (2,)
        assert event.start_values.shape == (2,)
    # recording must not perturb the simulation itself
    for control in CONTROLS:
        np.testing.assert_array_equal(
            result.predictions[control].value, plain.predictions[control].value
        )


def test_unknown_drivers_share_the_mean_embedding():
    inputs, ids = small_fixture()
    config = ModelConfig(threshold=0.3)
    params = init_params(config, ids)
    stranger_one = forward_batch(params, config, inputs, ["nobody", "nobody"])
    stranger_two = forward_batch(params, config, inputs, ["guest", "guest"])
    known = forward_batch(params, config, inputs, ids)
    for control in CONTROLS:
        np.testing.assert_array_equal(
            stranger_one.predictions[control].value,
            stranger_two.predictions[control].value,
        )
    assert any(
        not np.array_equal(
            stranger_one.predictions[c].value, known.predictions[c].value
        )
        for c in CONTROLS
    )


def test_forward_trip_returns_columns_and_trace():
    trip = truncate(synth_generate(2, 1, 4)[0], 70)
    config = ModelConfig()
    params = init_params(config, [trip.driver_id])
    outputs, trace = forward_trip(params, config, trip)
    assert outputs.shape == (70, 3)
    assert trace.potentials.shape == (70, config.n_features)
    assert trace.spikes.shape == (70, config.n_features)


def test_detached_forward_builds_no_graph():
    inputs, ids = small_fixture(steps=40)
    config = ModelConfig(threshold=0.3)
    params = init_params(config, ids)
    frozen = detach_params(params)
    result = forward_batch(frozen, config, inputs, ids)
    for control in CONTROLS:
        assert not result.predictions[control].requires_grad
    live = forward_batch(params, config, inputs, ids)
    for control in CONTROLS:
        assert live.predictions[control].requires_grad
