"""End-to-end driver model: perception, personalization, spiking
evidence accumulators, and three intermittent motor channels.

The forward pass walks a trip one timestep at a time. Each step the raw
channels are perceived into features, blended with the driver embedding,
and integrated by the accumulator bank. Whenever at least one neuron of
a trip spikes, every control channel compresses its spike-gated feature
proposals into a scalar target and launches a motor primitive toward it;
the prediction at each step is the current motor trajectory value.

A whole batch of trips runs in lock-step: tensors carry a lane per trip
and lanes never mix, so batching changes nothing but speed. The only
state carried across timesteps is the accumulator potentials and the
motor primitive pools, which is what makes mid-trip snapshot/replay
exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import accumulator, motor, perception, personalization
from . import autodiff as ad
from .autodiff import Tensor
from .errors import DatasetError

CONTROLS = ("brake", "throttle", "steer")

# Motor pools are swept for matured rows once they accumulate this many;
# sweeping less often does not change any evaluated value, it only lets
# the stacked arrays grow a little before they shrink again.
COMPACT_BACKLOG = 12


@dataclass
class ModelConfig:
    """Architecture and integration constants.

    ``channels`` input channels expand by ``expand_factor`` and compress
    to ``compress_factor * channels`` features (one accumulator neuron
    each). ``embed_width`` is the driver-embedding size, ``dt`` the
    integration step, ``threshold``/``sharpness`` the spike threshold
    and surrogate steepness, ``primitive_floor`` the launch floor of
    motor primitives, and ``motor_hidden`` the hidden widths of each
    motor compression stack (default: ``(channels, channels)``).
    """

    channels: int = 9
    expand_factor: int = 7
    compress_factor: int = 5
    embed_width: int = 10
    dt: float = 0.1
    threshold: float = 1.0
    sharpness: float = 4.0
    primitive_floor: float = 1e-6
    motor_hidden: tuple[int, ...] | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("channels", "expand_factor", "compress_factor", "embed_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        for name in ("dt", "threshold", "sharpness", "primitive_floor"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.motor_hidden is None:
            self.motor_hidden = (self.channels, self.channels)
        else:
            self.motor_hidden = tuple(int(w) for w in self.motor_hidden)
            if any(w < 1 for w in self.motor_hidden):
                raise ValueError("motor_hidden widths must be positive")

    @property
    def n_features(self) -> int:
        return self.compress_factor * self.channels


@dataclass
class ModelParams:
    """All learnable parameter groups."""

    perception: perception.PerceptionParams
    embeddings: personalization.EmbeddingTable
    personalization: personalization.PersonalizationParams
    accumulator: accumulator.AccumulatorParams
    motors: dict[str, motor.MotorParams]


def init_params(config: ModelConfig, driver_ids: Sequence[str]) -> ModelParams:
    """Seeded initialization; the embedding vocabulary is the sorted set
    of ``driver_ids``."""
    rng = np.random.default_rng(config.seed)
    table = personalization.init_embeddings(sorted(set(driver_ids)), config.embed_width, rng)
    return ModelParams(
        perception=perception.init_perception(
            config.channels, config.expand_factor, config.compress_factor, rng
        ),
        embeddings=table,
        personalization=personalization.init_personalization(
            config.n_features, config.embed_width, rng
        ),
        accumulator=accumulator.init_accumulator(config.n_features),
        motors={
            control: motor.init_motor(
                config.n_features, config.motor_hidden, rng, config.primitive_floor
            )
            for control in CONTROLS
        },
    )


def named_parameters(params: ModelParams) -> list[tuple[str, Tensor]]:
    """Deterministic (name, tensor) traversal used by the optimizer and
    the checkpoint format."""
    named = [
        ("perception.expand_weight", params.perception.expand_weight),
        ("perception.expand_bias", params.perception.expand_bias),
        ("perception.compress_weight", params.perception.compress_weight),
        ("perception.compress_bias", params.perception.compress_bias),
        ("embeddings.rows", params.embeddings.rows),
        ("personalization.weight", params.personalization.weight),
        ("personalization.bias", params.personalization.bias),
        ("accumulator.leak_raw", params.accumulator.leak_raw),
        ("accumulator.bias", params.accumulator.bias),
        ("accumulator.gain", params.accumulator.gain),
        ("accumulator.reset_value", params.accumulator.reset_value),
    ]
    for control in CONTROLS:
        head = params.motors[control]
        named.append((f"motor.{control}.prop_bias", head.prop_bias))
        named.append((f"motor.{control}.prop_gain", head.prop_gain))
        named.append((f"motor.{control}.rate_raw", head.rate_raw))
        for i, (weight, bias) in enumerate(head.layers):
            named.append((f"motor.{control}.layer{i}.weight", weight))
            named.append((f"motor.{control}.layer{i}.bias", bias))
    return named


def count_params(params: ModelParams) -> int:
    return sum(t.value.size for _, t in named_parameters(params))


def detach_params(params: ModelParams) -> ModelParams:
    """Constant view of the parameters sharing the same value arrays.

    Forward passes through the view build no gradient graph, yet see
    every in-place optimizer update. Used for validation passes.
    """
    return ModelParams(
        perception=perception.PerceptionParams(
            expand_weight=params.perception.expand_weight.detach(),
            expand_bias=params.perception.expand_bias.detach(),
            compress_weight=params.perception.compress_weight.detach(),
            compress_bias=params.perception.compress_bias.detach(),
        ),
        embeddings=personalization.EmbeddingTable(
            vocabulary=params.embeddings.vocabulary,
            rows=params.embeddings.rows.detach(),
        ),
        personalization=personalization.PersonalizationParams(
            weight=params.personalization.weight.detach(),
            bias=params.personalization.bias.detach(),
        ),
        accumulator=accumulator.AccumulatorParams(
            leak_raw=params.accumulator.leak_raw.detach(),
            bias=params.accumulator.bias.detach(),
            gain=params.accumulator.gain.detach(),
            reset_value=params.accumulator.reset_value.detach(),
        ),
        motors={
            control: motor.MotorParams(
                prop_bias=head.prop_bias.detach(),
                prop_gain=head.prop_gain.detach(),
                rate_raw=head.rate_raw.detach(),
                layers=[(w.detach(), b.detach()) for w, b in head.layers],
                baseline=head.baseline,
            )
            for control, head in params.motors.items()
        },
    )


# ---------------------------------------------------------------------------
# Simulation state

@dataclass
class SimState:
    """Everything carried across timesteps: accumulator potentials, one
    motor pool per control, and the index of the next step.

    Time is kept as an integer step count so that a run resumed from a
    snapshot lands on exactly the same float time grid ``step * dt`` as
    an uninterrupted run — accumulating ``t += dt`` would drift by an
    ulp and break bit-exact replay.
    """

    accumulator: accumulator.AccumulatorState
    motors: dict[str, motor.MotorState]
    step: int = 0


def init_state(config: ModelConfig, lanes: int = 1) -> SimState:
    return SimState(
        accumulator=accumulator.init_state(config.n_features, batch=lanes),
        motors={
            control: motor.new_state(lanes, config.primitive_floor)
            for control in CONTROLS
        },
        step=0,
    )


def snapshot_state(state: SimState) -> dict:
    """Plain-array snapshot of a :class:`SimState` (no gradient graph)."""
    pools = {}
    for control, pool in state.motors.items():
        pools[control] = {
            "lanes": pool.lanes,
            "baseline": pool.baseline,
            "magnitudes": None if pool.magnitudes is None else pool.magnitudes.value.copy(),
            "rates": None if pool.rates is None else pool.rates.value.copy(),
            "directions": pool.directions.copy(),
            "start_times": pool.start_times.copy(),
            "fold_times": pool.fold_times.copy(),
            "settled": pool.settled.value.copy(),
        }
    return {
        "step": state.step,
        "potentials": state.accumulator.potentials.value.copy(),
        "motors": pools,
    }


def restore_state(snapshot: Mapping) -> SimState:
    """Rebuild a constant-tensor SimState from :func:`snapshot_state`.

    The restored state carries values only (no gradient history, no
    primitive records); replaying forward from it reproduces the
    original run's predictions exactly.
    """
    pools = {}
    for control, blob in snapshot["motors"].items():
        pools[control] = motor.MotorState(
            lanes=int(blob["lanes"]),
            baseline=float(blob["baseline"]),
            magnitudes=None if blob["magnitudes"] is None else Tensor(blob["magnitudes"].copy()),
            rates=None if blob["rates"] is None else Tensor(blob["rates"].copy()),
            directions=blob["directions"].copy(),
            start_times=blob["start_times"].copy(),
            fold_times=blob["fold_times"].copy(),
            settled=Tensor(blob["settled"].copy()),
            active=(),
        )
    return SimState(
        accumulator=accumulator.AccumulatorState(
            potentials=Tensor(snapshot["potentials"].copy())
        ),
        motors=pools,
        step=int(snapshot["step"]),
    )


# ---------------------------------------------------------------------------
# Forward pass

@dataclass(frozen=True)
class TriggerEvent:
    """One launch decision: which lanes fired and what they aimed at."""

    control: str
    step: int
    time: float
    lanes: np.ndarray
    targets: np.ndarray
    start_values: np.ndarray


@dataclass
class Trace:
    """Per-step recordings of a forward pass (values, not tensors)."""

    potentials: np.ndarray  # [T, N, kC] membrane potential after each step
    spikes: np.ndarray  # [T, N, kC]
    triggers: list[TriggerEvent] = field(default_factory=list)


@dataclass
class ForwardResult:
    predictions: dict[str, Tensor]  # control -> [N, T]
    state: SimState
    trace: Trace | None


def forward_batch(
    params: ModelParams,
    config: ModelConfig,
    inputs: np.ndarray,
    driver_ids: Sequence[str],
    *,
    smooth: bool = False,
    state: SimState | None = None,
    record: bool = False,
) -> ForwardResult:
    """Run ``inputs`` [N, T, channels] through the model lane-parallel.

    ``smooth=True`` replaces the hard spike with its sigmoid relaxation
    (for finite-difference gradient checks). ``state`` continues a
    previous run (e.g. a restored snapshot); ``record`` returns a Trace.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 3:
        raise DatasetError(f"inputs must be [trips, steps, channels], got {inputs.shape}")
    n_lanes, n_steps, n_channels = inputs.shape
    if n_channels != config.channels:
        raise DatasetError(
            f"expected {config.channels} input channels, got {n_channels}"
        )
    if len(driver_ids) != n_lanes:
        raise DatasetError(f"{n_lanes} trips but {len(driver_ids)} driver ids")

    if state is None:
        state = init_state(config, lanes=n_lanes)
    origin_step = state.step
    acc_state = state.accumulator
    pools = dict(state.motors)

    # Hoisted per-epoch nodes, shared by every timestep.
    embedding = personalization.lookup_batch(params.embeddings, driver_ids)
    leak = accumulator.effective_leak(params.accumulator)
    rates = {c: ad.exp(params.motors[c].rate_raw) for c in CONTROLS}

    steps: dict[str, list[Tensor]] = {c: [] for c in CONTROLS}
    potentials_log: list[np.ndarray] = []
    spikes_log: list[np.ndarray] = []
    events: list[TriggerEvent] = []

    for t in range(n_steps):
        now = (origin_step + t) * config.dt
        x_t = Tensor(inputs[:, t, :])
        features = perception.perceive(params.perception, x_t)
        body = personalization.personalize(params.personalization, features, embedding)
        acc_state, spikes = accumulator.step(
            params.accumulator,
            acc_state,
            body,
            config.dt,
            threshold=config.threshold,
            sharpness=config.sharpness,
            smooth=smooth,
            leak=leak,
        )
        fired = spikes.value > 0.5
        fired_lanes = fired.any(axis=1)
        if record:
            potentials_log.append(acc_state.potentials.value.copy())
            spikes_log.append(spikes.value.copy())

        launch = bool(fired_lanes.any())
        for control in CONTROLS:
            pool = pools[control]
            # Folding matured rows is exactness-neutral (an unfolded row
            # keeps being evaluated with its full pull), so it is
            # amortized: only sweep once the pool has grown a dozen rows.
            if pool.start_times.shape[0] >= COMPACT_BACKLOG:
                pool = motor.compact(pool, now)
            if launch:
                head = params.motors[control]
                target = motor.compress(head, motor.gated_proposals(head, body, spikes))
                start = motor.evaluate(pool, now)
                pool, value = motor.trigger_with_value(
                    pool,
                    target,
                    now,
                    head,
                    lanes=fired_lanes,
                    start_value=start,
                    rate=rates[control],
                )
                if record:
                    events.append(
                        TriggerEvent(
                            control=control,
                            step=t,
                            time=now,
                            lanes=fired_lanes.copy(),
                            targets=target.value.copy(),
                            start_values=start.value.copy(),
                        )
                    )
            else:
                value = motor.evaluate(pool, now)
            pools[control] = pool
            steps[control].append(value)

    predictions = {c: ad.stack(steps[c], axis=1) for c in CONTROLS}
    trace = None
    if record:
        trace = Trace(
            potentials=np.stack(potentials_log, axis=0),
            spikes=np.stack(spikes_log, axis=0),
            triggers=events,
        )
    return ForwardResult(
        predictions=predictions,
        state=SimState(
            accumulator=acc_state, motors=pools, step=origin_step + n_steps
        ),
        trace=trace,
    )


def forward_trip(params: ModelParams, config: ModelConfig, trip) -> tuple[np.ndarray, Trace]:
    """Single-trip forward pass; predictions as a plain [T, 3] array in
    control order (brake, throttle, steer), plus the recorded trace."""
    result = forward_batch(
        params,
        config,
        trip.inputs[None, :, :],
        [trip.driver_id],
        record=True,
    )
    columns = [result.predictions[c].value[0] for c in CONTROLS]
    trace = result.trace
    trace.potentials = trace.potentials[:, 0, :]
    trace.spikes = trace.spikes[:, 0, :]
    return np.stack(columns, axis=1), trace
