"""Dataset ingestion, scaling, padding, and a synthetic scenario generator.

Wire format: one CSV file per trip with header
``driver_id,trip_id,t,ego_speed,ego_lon,ego_lat,target_speed,gaze_pitch,
gaze_yaw,scooter_speed,scooter_lon,scooter_lat,brake,throttle,steer``.
Times are seconds at 10 Hz; positions are meters in a local frame whose
origin sits at the intersection where the ego vehicle turns.

Inputs are z-scored with the population standard deviation; brake and
throttle are min-max scaled to (0, 1) and steering to (-1, 1). Scalers
are fitted on the training split only and applied to validation as is.

The synthetic generator stands in for proprietary test-track data: the
ego approaches an intersection at a trial target speed, brakes, turns
right while an e-scooter approaches (or waits) on a crossing path, then
accelerates away. Drivers come in two styles with parameter ranges
chosen disjoint — "cautious" drivers always start braking farther from
the intersection than "aggressive" ones — so style-separation tests
have ground truth.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DatasetError, DegenerateDataError

NOMINAL_DT = 0.1

CHANNEL_NAMES = (
    "ego_speed",
    "ego_lon",
    "ego_lat",
    "target_speed",
    "gaze_pitch",
    "gaze_yaw",
    "scooter_speed",
    "scooter_lon",
    "scooter_lat",
)
OUTPUT_NAMES = ("brake", "throttle", "steer")
HEADER = ("driver_id", "trip_id", "t") + CHANNEL_NAMES + OUTPUT_NAMES

# Target ranges for scaled outputs: brake, throttle in (0,1); steer in (-1,1).
OUTPUT_LOW = np.array([0.0, 0.0, -1.0])
OUTPUT_HIGH = np.array([1.0, 1.0, 1.0])


@dataclass
class Trip:
    """One recorded drive: times [T], inputs [T x 9], outputs [T x 3]."""

    driver_id: str
    trip_id: str
    times: np.ndarray
    inputs: np.ndarray
    outputs: np.ndarray

    @property
    def length(self) -> int:
        return self.times.shape[0]


def truncate(trip: Trip, steps: int) -> Trip:
    """First ``steps`` timesteps of a trip (micro-fixture helper)."""
    return replace(
        trip,
        times=trip.times[:steps].copy(),
        inputs=trip.inputs[:steps].copy(),
        outputs=trip.outputs[:steps].copy(),
    )


def trips_by_driver(dataset: Sequence[Trip]) -> dict[str, list[Trip]]:
    grouped: dict[str, list[Trip]] = {}
    for trip in dataset:
        grouped.setdefault(trip.driver_id, []).append(trip)
    return grouped


# ---------------------------------------------------------------------------
# Loading and saving

def _load_trip(path: Path) -> Trip:
    def fail(line: int, message: str) -> DatasetError:
        return DatasetError(f"{path}:{line}: {message}")

    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise fail(1, "empty file") from None
        if tuple(header) != HEADER:
            missing = [name for name in HEADER if name not in header]
            if missing:
                raise fail(1, f"missing column {missing[0]!r}")
            raise fail(1, f"bad header {header!r}, expected {list(HEADER)!r}")

        driver_id: str | None = None
        trip_id: str | None = None
        times: list[float] = []
        rows: list[list[float]] = []
        for line, record in enumerate(reader, start=2):
            if len(record) != len(HEADER):
                raise fail(line, f"expected {len(HEADER)} fields, got {len(record)}")
            if driver_id is None:
                driver_id, trip_id = record[0], record[1]
            elif record[0] != driver_id or record[1] != trip_id:
                raise fail(
                    line,
                    f"trip file mixes ids: ({record[0]!r}, {record[1]!r}) after "
                    f"({driver_id!r}, {trip_id!r})",
                )
            try:
                values = [float(field) for field in record[2:]]
            except ValueError as exc:
                raise fail(line, f"non-numeric field: {exc}") from None
            if not all(math.isfinite(v) for v in values):
                raise fail(line, "non-finite value")
            if times:
                step = values[0] - times[-1]
                if step <= 0.0:
                    raise fail(line, f"time not strictly increasing (step {step:g})")
                if abs(step - NOMINAL_DT) > 0.01 * NOMINAL_DT + 1e-9:
                    raise fail(
                        line,
                        f"non-uniform sampling: step {step:g} s, expected "
                        f"{NOMINAL_DT:g} s within 1%",
                    )
            times.append(values[0])
            rows.append(values[1:])

    if driver_id is None or trip_id is None:
        raise fail(2, "no data rows")
    data = np.array(rows)
    return Trip(
        driver_id=driver_id,
        trip_id=trip_id,
        times=np.array(times),
        inputs=data[:, : len(CHANNEL_NAMES)],
        outputs=data[:, len(CHANNEL_NAMES) :],
    )


def load_dataset(path: str | Path) -> list[Trip]:
    """All ``*.csv`` trips under ``path``, sorted by (driver_id, trip_id)."""
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    files = sorted(root.glob("*.csv"))
    if not files:
        raise DatasetError(f"{root}: no .csv trip files")
    trips = [_load_trip(f) for f in files]
    trips.sort(key=lambda trip: (trip.driver_id, trip.trip_id))
    return trips


def save_dataset(dataset: Sequence[Trip], path: str | Path) -> list[Path]:
    """One ``<trip_id>.csv`` per trip; floats carry 17 significant digits."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    written = []
    for trip in dataset:
        out = root / f"{trip.trip_id}.csv"
        lines = [",".join(HEADER)]
        for i in range(trip.length):
            fields = [trip.driver_id, trip.trip_id, "%.17e" % trip.times[i]]
            fields += ["%.17e" % v for v in trip.inputs[i]]
            fields += ["%.17e" % v for v in trip.outputs[i]]
            lines.append(",".join(fields))
        out.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(out)
    return written


# ---------------------------------------------------------------------------
# Scaling

@dataclass
class Scalers:
    """Fit-once input/output scaling statistics.

    ``input_mean``/``input_std`` z-score the 9 input channels (population
    standard deviation); ``output_min``/``output_max`` min-max map the 3
    outputs onto ``OUTPUT_LOW``..``OUTPUT_HIGH``.
    """

    input_mean: np.ndarray
    input_std: np.ndarray
    output_min: np.ndarray
    output_max: np.ndarray


def fit_scalers(trips: Sequence[Trip]) -> Scalers:
    if not trips:
        raise ValueError("cannot fit scalers on an empty training split")
    inputs = np.concatenate([t.inputs for t in trips], axis=0)
    outputs = np.concatenate([t.outputs for t in trips], axis=0)
    mean = inputs.mean(axis=0)
    std = inputs.std(axis=0)
    for i, name in enumerate(CHANNEL_NAMES):
        if std[i] == 0.0:
            raise DegenerateDataError(f"input channel {name!r} has zero variance")
    low = outputs.min(axis=0)
    high = outputs.max(axis=0)
    for i, name in enumerate(OUTPUT_NAMES):
        if low[i] == high[i]:
            raise DegenerateDataError(f"output {name!r} is constant ({low[i]:g})")
    return Scalers(input_mean=mean, input_std=std, output_min=low, output_max=high)


def apply_scalers(scalers: Scalers, trips: Sequence[Trip]) -> list[Trip]:
    scaled = []
    for trip in trips:
        span = scalers.output_max - scalers.output_min
        outputs = OUTPUT_LOW + (trip.outputs - scalers.output_min) / span * (
            OUTPUT_HIGH - OUTPUT_LOW
        )
        scaled.append(
            replace(
                trip,
                inputs=(trip.inputs - scalers.input_mean) / scalers.input_std,
                outputs=outputs,
            )
        )
    return scaled


def invert_outputs(scalers: Scalers, outputs: np.ndarray) -> np.ndarray:
    """Map scaled outputs (last axis = brake, throttle, steer) back to raw."""
    span = scalers.output_max - scalers.output_min
    return (
        scalers.output_min
        + (np.asarray(outputs) - OUTPUT_LOW) / (OUTPUT_HIGH - OUTPUT_LOW) * span
    )


# ---------------------------------------------------------------------------
# Batching

@dataclass
class Batch:
    """Zero-padded stack of trips with validity masks."""

    inputs: np.ndarray  # [N, T, 9]
    outputs: np.ndarray  # [N, T, 3]
    mask: np.ndarray  # [N, T], 1.0 on valid steps
    lengths: np.ndarray  # [N]
    driver_ids: list[str]
    trip_ids: list[str]


def pad_and_mask(trips: Sequence[Trip], length: int | None = None) -> Batch:
    """Pad trips with zeros to a common length (default: the longest)."""
    if not trips:
        raise ValueError("cannot batch zero trips")
    lengths = np.array([t.length for t in trips])
    width = int(lengths.max()) if length is None else int(length)
    if width < lengths.max():
        raise ValueError(f"length {width} shorter than longest trip {lengths.max()}")
    n = len(trips)
    inputs = np.zeros((n, width, len(CHANNEL_NAMES)))
    outputs = np.zeros((n, width, len(OUTPUT_NAMES)))
    mask = np.zeros((n, width))
    for i, trip in enumerate(trips):
        inputs[i, : trip.length] = trip.inputs
        outputs[i, : trip.length] = trip.outputs
        mask[i, : trip.length] = 1.0
    return Batch(
        inputs=inputs,
        outputs=outputs,
        mask=mask,
        lengths=lengths,
        driver_ids=[t.driver_id for t in trips],
        trip_ids=[t.trip_id for t in trips],
    )


# ---------------------------------------------------------------------------
# Synthetic scenario generator

# Style parameter ranges. The brake-onset windows (meters from the
# intersection, including per-trip jitter) are disjoint by construction:
# cautious >= 30 m, aggressive <= 21.5 m. Control waveforms are
# trapezoids — multi-second cosine ramps into held plateaus — so the
# maneuvers are trackable by intermittent corrections that settle on a
# level, rather than demanding continuous re-planning. ``brake_time``
# is the brake application ramp; the plateau length follows from the
# onset distance and the speed profile. ``turn_time`` is the held-wheel
# plateau through the curve.
_STYLES: Mapping[str, dict] = {
    "cautious": dict(
        onset=(32.0, 38.0),
        onset_jitter=1.5,
        onset_clip=(30.0, 41.0),
        brake_peak=(0.30, 0.45),
        brake_time=(2.6, 3.0),
        turn_speed=(2.2, 2.8),
        steer_peak=(0.26, 0.32),
        turn_time=(3.2, 3.8),
    ),
    "aggressive": dict(
        onset=(14.0, 20.0),
        onset_jitter=1.5,
        onset_clip=(12.5, 21.5),
        brake_peak=(0.70, 0.92),
        brake_time=(1.8, 2.2),
        turn_speed=(2.4, 3.0),
        steer_peak=(0.30, 0.38),
        turn_time=(2.8, 3.5),
    ),
}

# Depth of the left counter-steer plateau while straightening out,
# relative to the right-turn peak. Chosen so the scaled zero point of
# the steering channel stays near zero after min-max normalization.
_COUNTER_DEPTH = 0.7


def _smooth_noise(rng: np.random.Generator, n: int, std: float, alpha: float = 0.25) -> np.ndarray:
    white = rng.normal(0.0, std, n)
    out = np.empty(n)
    acc = 0.0
    for i in range(n):
        acc = (1.0 - alpha) * acc + alpha * white[i]
        out[i] = acc
    return out


def _ramp(n: int) -> np.ndarray:
    return 0.5 * (1.0 - np.cos(np.pi * (np.arange(n) + 0.5) / n))


def _steps(seconds: float) -> int:
    return max(1, int(round(seconds / NOMINAL_DT)))


def _draw(rng: np.random.Generator, bounds: tuple[float, float]) -> float:
    return float(rng.uniform(*bounds))


def _generate_trip(
    driver_id: str,
    trip_id: str,
    style: dict,
    driver_draw: dict,
    rng: np.random.Generator,
    stationary_scooter: bool,
) -> Trip:
    target_speed = _draw(rng, (6.5, 8.0))
    onset = float(
        np.clip(
            driver_draw["onset"] + rng.uniform(-style["onset_jitter"], style["onset_jitter"]),
            *style["onset_clip"],
        )
    )
    brake_peak = float(np.clip(driver_draw["brake_peak"] + rng.uniform(-0.04, 0.04), 0.05, 0.98))
    turn_speed = driver_draw["turn_speed"] + _draw(rng, (-0.3, 0.3))
    steer_peak = float(np.clip(driver_draw["steer_peak"] + rng.uniform(-0.02, 0.02), 0.2, 0.95))
    cruise_throttle = _draw(rng, (0.05, 0.10))
    exit_speed = _draw(rng, (5.0, 7.0))
    exit_throttle = _draw(rng, (0.50, 0.75))
    post_throttle = _draw(rng, (0.15, 0.25))

    # Segment durations (seconds). Braking decelerates from the cruise
    # speed to the turn speed over the onset distance, so the plateau
    # length is implied by the drawn onset rather than drawn directly.
    cruise_time = _draw(rng, (2.8, 3.6))
    brake_in = driver_draw["brake_time"] + _draw(rng, (-0.2, 0.2))
    brake_release = 2.2
    decel_total = 2.0 * onset / (target_speed + turn_speed)
    brake_hold = max(decel_total - brake_in, 1.2)
    turn_hold = driver_draw["turn_time"] + _draw(rng, (-0.3, 0.3))
    turn_release = 2.0
    counter_hold = 2.0
    counter_release = 1.8
    accel_in = 2.0
    accel_hold = _draw(rng, (2.4, 3.0))
    accel_out = 2.0
    tail_time = _draw(rng, (1.2, 2.0))

    n_bin = _steps(brake_in)
    n_bout = _steps(brake_release)
    n_tout = _steps(turn_release)
    n_cout = _steps(counter_release)
    n_ain = _steps(accel_in)
    n_aout = _steps(accel_out)

    # Segment boundaries (step indices). The brake release doubles as
    # the turn entry: the driver eases off the pedal while winding the
    # wheel in, so there is no separate roll segment.
    c0 = _steps(cruise_time)
    c1 = c0 + n_bin
    c2 = c1 + _steps(brake_hold)
    c3 = c2 + n_bout
    c4 = c3 + _steps(turn_hold)
    c5 = c4 + n_tout
    c6 = c5 + _steps(counter_hold)
    c7 = c6 + n_cout
    c8 = c7 + n_ain
    c9 = c8 + _steps(accel_hold)
    c10 = c9 + n_aout
    total = c10 + _steps(tail_time)

    speed = np.empty(total)
    speed[:c0] = target_speed
    speed[c0:c2] = target_speed + (turn_speed - target_speed) * _ramp(c2 - c0)
    speed[c2:c7] = turn_speed
    speed[c7:c9] = turn_speed + (exit_speed - turn_speed) * _ramp(c9 - c7)
    speed[c9:] = exit_speed

    # The brake is not released outright at the turn: the driver drags
    # it lightly through the corner and lets go entering the accel phase.
    drag_level = _draw(rng, (0.25, 0.35)) * brake_peak
    brake = np.zeros(total)
    brake[c0:c1] = brake_peak * _ramp(n_bin)
    brake[c1:c2] = brake_peak
    brake[c2:c3] = brake_peak + (drag_level - brake_peak) * _ramp(n_bout)
    brake[c3:c6] = drag_level
    brake[c6:c7] = drag_level * (1.0 - _ramp(n_cout))

    throttle = np.zeros(total)
    throttle[:c0] = cruise_throttle
    throttle[c0:c1] = cruise_throttle * (1.0 - _ramp(n_bin))
    throttle[c7:c8] = exit_throttle * _ramp(n_ain)
    throttle[c8:c9] = exit_throttle
    throttle[c9:c10] = exit_throttle + (post_throttle - exit_throttle) * _ramp(n_aout)
    throttle[c10:] = post_throttle

    counter_level = _COUNTER_DEPTH * steer_peak
    steer = np.zeros(total)
    steer[c2:c3] = steer_peak * _ramp(n_bout)
    steer[c3:c4] = steer_peak
    steer[c4:c5] = steer_peak - (steer_peak + counter_level) * _ramp(n_tout)
    steer[c5:c6] = -counter_level
    steer[c6:c7] = -counter_level * (1.0 - _ramp(n_cout))

    turn_start = c2

    # Heading: a quarter turn to the right spread over the right-steer
    # window, plus a slow wander so lateral position is never constant.
    heading_rate = np.zeros(total)
    rightward = np.clip(steer[c2:c6], 0.0, None)
    heading_rate[c2:c6] = (np.pi / 2.0) * rightward / rightward.sum()
    heading = np.cumsum(heading_rate) + np.cumsum(_smooth_noise(rng, total, 0.0015))

    step_lon = speed * np.sin(heading) * NOMINAL_DT
    step_lat = speed * np.cos(heading) * NOMINAL_DT
    ego_lon = np.cumsum(step_lon)
    ego_lat = np.cumsum(step_lat)
    # Place the origin at the point where the turn begins.
    ego_lon -= ego_lon[turn_start]
    ego_lat -= ego_lat[turn_start]

    times = np.arange(total) * NOMINAL_DT

    if stationary_scooter:
        scooter_lon = np.full(total, _draw(rng, (4.0, 8.0)))
        scooter_speed = np.zeros(total)
    else:
        approach_speed = _draw(rng, (4.0, 6.0))
        stop_lon = _draw(rng, (1.5, 3.0))
        stop_time = times[turn_start] + _draw(rng, (-1.0, 2.0))
        decel_time = 2.5
        cruise_span = max(stop_time - decel_time, 0.0)
        scooter_speed = np.zeros(total)
        n_sc = min(_steps(cruise_span), total)
        scooter_speed[:n_sc] = approach_speed
        n_sd = min(_steps(decel_time), total - n_sc)
        scooter_speed[n_sc : n_sc + n_sd] = approach_speed * (1.0 - _ramp(n_sd))
        travel = np.cumsum(scooter_speed) * NOMINAL_DT
        scooter_lon = (stop_lon + travel[-1]) - travel
    scooter_lat = np.full(total, _draw(rng, (1.5, 3.0)))

    rel_lon = scooter_lon - ego_lon
    rel_lat = scooter_lat - ego_lat
    distance = np.hypot(rel_lon, rel_lat)
    bearing = np.arctan2(rel_lon, rel_lat) - heading
    bearing = (bearing + np.pi) % (2.0 * np.pi) - np.pi
    gaze_yaw = np.clip(0.8 * bearing, -1.3, 1.3) + _smooth_noise(rng, total, 0.05)
    gaze_pitch = -0.10 - 0.25 * np.exp(-distance / 25.0) + _smooth_noise(rng, total, 0.03)

    brake = np.clip(brake + _smooth_noise(rng, total, 0.005), 0.0, 1.0)
    throttle = np.clip(throttle + _smooth_noise(rng, total, 0.008), 0.0, 1.0)
    steer = steer + _smooth_noise(rng, total, 0.004)

    inputs = np.column_stack(
        [
            speed,
            ego_lon,
            ego_lat,
            np.full(total, target_speed),
            gaze_pitch,
            gaze_yaw,
            scooter_speed,
            scooter_lon,
            scooter_lat,
        ]
    )
    outputs = np.column_stack([brake, throttle, steer])
    return Trip(
        driver_id=driver_id,
        trip_id=trip_id,
        times=times,
        inputs=inputs,
        outputs=outputs,
    )


def synth_generate(
    drivers: int,
    trips_per_driver: int,
    seed: int,
    styles: Sequence[str] = ("cautious", "aggressive"),
) -> list[Trip]:
    """Deterministic synthetic dataset: ``drivers`` x ``trips_per_driver``.

    Driver ``i`` gets style ``styles[i % len(styles)]`` (so the default
    alternates cautious/aggressive) and persistent style parameters;
    every trip adds jitter. Every fourth trip of a driver uses a
    stationary scooter. The same seed reproduces the dataset exactly.
    """
    if drivers < 2:
        raise ValueError(f"need at least 2 drivers, got {drivers}")
    if trips_per_driver < 1:
        raise ValueError(f"need at least 1 trip per driver, got {trips_per_driver}")
    for name in styles:
        if name not in _STYLES:
            raise ValueError(f"unknown style {name!r}, options: {sorted(_STYLES)}")

    dataset = []
    for di in range(drivers):
        style_name = styles[di % len(styles)]
        style = _STYLES[style_name]
        driver_rng = np.random.default_rng([seed, di])
        driver_draw = dict(
            onset=_draw(driver_rng, style["onset"]),
            brake_peak=_draw(driver_rng, style["brake_peak"]),
            brake_time=_draw(driver_rng, style["brake_time"]),
            turn_speed=_draw(driver_rng, style["turn_speed"]),
            steer_peak=_draw(driver_rng, style["steer_peak"]),
            turn_time=_draw(driver_rng, style["turn_time"]),
        )
        driver_id = f"{style_name}_{di:02d}"
        for tj in range(trips_per_driver):
            trip_rng = np.random.default_rng([seed, di, tj])
            dataset.append(
                _generate_trip(
                    driver_id=driver_id,
                    trip_id=f"{driver_id}_trip{tj}",
                    style=style,
                    driver_draw=driver_draw,
                    rng=trip_rng,
                    stationary_scooter=(tj % 4 == 3),
                )
            )
    return dataset
