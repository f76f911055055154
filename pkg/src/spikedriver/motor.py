"""Intermittent motor control built from superposed growth primitives.

Each control channel (brake, throttle, steering) holds a pool of
primitives. A primitive launched at time ``t0`` toward a target that is
``delta`` away from the current trajectory value contributes a smooth
sigmoidal pull

    direction * T / (1 + (T / baseline) * exp(-(T + R) * (t - t0)))

where ``T = |delta|`` is the magnitude, ``direction = sign(delta)``,
``baseline`` is a small positive floor, and ``R = exp(rate_raw)`` is a
learned growth-rate floor shared by the channel. At launch the pull is
roughly ``direction * baseline``; it saturates at ``direction * T``, and
larger excursions saturate faster because the exponent scales with
``T + R``. The channel's trajectory is the sum of all pulls plus a
settled offset that absorbs primitives which have fully saturated.

Primitives for a batch of trips are stored stacked: one magnitude tensor
of shape ``[P, N]`` covers ``P`` primitives across ``N`` trips, so
evaluating the whole pool costs a fixed handful of array operations
regardless of ``P``. Lanes (trips) that did not fire at a launch
timestep get magnitude zero and direction zero in that row, which makes
their contribution exactly ``0.0`` forever.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericError, ShapeError

# A primitive folds into the settled offset once (T + R) * age exceeds
# this, leaving a relative gap below exp(-45) / baseline ~ 3e-14.
FOLD_EXPONENT = 45.0

# Initial growth-rate floor, as raw log-rate: R = exp(4.9) ~ 134. A
# fresh pull of magnitude T spends about ln(T / baseline) / (T + R)
# seconds in its flat incubation before it visibly moves, so a launched
# correction only lands after that dead time. Initializing the floor
# this fast keeps the dead time within one 0.1 s integration step for
# the sub-unit magnitudes that min-max-scaled outputs produce, which
# makes corrections land where they aimed instead of where the
# trajectory has meanwhile drifted — launch-correct-relaunch feedback
# at slow rates oscillates for exactly that reason.
RATE_RAW_INIT = 4.9


@dataclass
class MotorParams:
    """Learnable parameters of one control channel.

    ``prop_bias`` and ``prop_gain`` shape the per-feature target
    proposals, the compression ``layers`` reduce gated proposals to one
    scalar target, and ``rate_raw`` parameterizes the growth-rate floor
    ``R = exp(rate_raw)``. ``baseline`` is the fixed launch floor of
    every primitive.
    """

    prop_bias: Tensor
    prop_gain: Tensor
    rate_raw: Tensor
    layers: list[tuple[Tensor, Tensor]]
    baseline: float = 1e-6


@dataclass(frozen=True)
class MotorPrimitive:
    """Value-level record of one launched primitive (per-lane arrays)."""

    magnitude: np.ndarray
    direction: np.ndarray
    gain: np.ndarray
    rate: float
    start_time: float
    start_value: np.ndarray


@dataclass(frozen=True)
class MotorState:
    """Pool of active primitives for one control channel.

    ``magnitudes`` [P, N] and ``rates`` [P, 1] live in the gradient
    graph; ``directions`` [P, N], ``start_times`` [P] and ``fold_times``
    [P] are plain arrays. ``settled`` [N] accumulates the asymptotes of
    folded primitives. ``active`` mirrors the stacked rows as
    inspectable records.
    """

    lanes: int
    baseline: float
    magnitudes: Tensor | None
    rates: Tensor | None
    directions: np.ndarray
    start_times: np.ndarray
    fold_times: np.ndarray
    settled: Tensor
    active: tuple[MotorPrimitive, ...] = field(default_factory=tuple)


def init_motor(
    n_features: int,
    hidden: Sequence[int],
    rng: np.random.Generator,
    baseline: float = 1e-6,
) -> MotorParams:
    """Initialize one channel: identity proposals, a fast rate floor
    (see :data:`RATE_RAW_INIT`), and uniform fan-in compression weights
    with zero biases."""
    from .perception import uniform_fan_in

    widths = [n_features, *hidden, 1]
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        layers.append(
            (
                Tensor(uniform_fan_in(rng, fan_out, fan_in), requires_grad=True),
                Tensor(np.zeros(fan_out), requires_grad=True),
            )
        )
    return MotorParams(
        prop_bias=Tensor(np.zeros(n_features), requires_grad=True),
        prop_gain=Tensor(np.ones(n_features), requires_grad=True),
        rate_raw=Tensor(float(RATE_RAW_INIT), requires_grad=True),
        layers=layers,
        baseline=baseline,
    )


def propose(params: MotorParams, features: Tensor) -> Tensor:
    """Per-feature target proposals: ``prop_bias + prop_gain * features``."""
    return params.prop_bias + params.prop_gain * features


def gate(proposals: Tensor, spikes: Tensor) -> Tensor:
    """Mask proposals by the spike vector: silent features propose nothing."""
    return proposals * spikes


def gated_proposals(params: MotorParams, features: Tensor, spikes: Tensor) -> Tensor:
    """``gate(propose(params, features), spikes)`` as one fused node.

    This runs per control channel at every spiking timestep, so the
    fused form keeps the tape short; the value equals the composition
    exactly.
    """
    bias, gain = params.prop_bias, params.prop_gain
    fv, sv = features.value, spikes.value
    props = bias.value + gain.value * fv
    value = props * sv

    out, live = ad.make_node(value, (bias, gain, features, spikes))
    if live:
        batched = value.ndim == 2

        def _bw():
            g = out.grad
            gs = g * sv
            if bias.requires_grad:
                ad.deposit(bias, gs.sum(axis=0) if batched else gs)
            if gain.requires_grad:
                gsf = gs * fv
                ad.deposit(gain, gsf.sum(axis=0) if batched else gsf)
            if features.requires_grad:
                ad.deposit(features, gs * gain.value)
            if spikes.requires_grad:
                ad.deposit(spikes, g * props)
        out._backward = _bw
    return out


def compress(params: MotorParams, gated: Tensor) -> Tensor:
    """Squash gated proposals to one target per lane through the
    compression stack (mish between layers, linear last layer).

    The whole stack is one fused graph node; the value equals the
    layer-by-layer composition exactly.
    """
    h = gated.value
    batched = h.ndim == 2
    taped = []  # (input, preactivation, tanh(softplus(pre))) per hidden layer
    for weight, bias in params.layers[:-1]:
        pre = h @ weight.value.T + bias.value
        squash = np.tanh(ad.softplus_array(pre))
        taped.append((h, pre, squash))
        h = pre * squash  # mish
    w_last, b_last = params.layers[-1]
    pre_last = h @ w_last.value.T + b_last.value
    value = pre_last.reshape(pre_last.shape[0]) if batched else pre_last.reshape(())

    parents = [t for pair in params.layers for t in pair]
    parents.append(gated)
    out, live = ad.make_node(value, tuple(parents))
    if live:
        last_input = h

        def _bw():
            g = np.asarray(out.grad)
            gl = g[:, None] if batched else g.reshape(1)
            if w_last.requires_grad:
                ad.deposit(w_last, gl.T @ last_input if batched
                           else np.outer(gl, last_input))
            if b_last.requires_grad:
                ad.deposit(b_last, gl.sum(axis=0) if batched else gl)
            gh = gl @ w_last.value
            for (weight, bias), (h_in, pre, squash) in zip(
                reversed(params.layers[:-1]), reversed(taped)
            ):
                gm = gh * (
                    squash + pre * (1.0 - squash * squash) * ad.sigmoid_array(pre)
                )
                if weight.requires_grad:
                    ad.deposit(weight, gm.T @ h_in if batched else np.outer(gm, h_in))
                if bias.requires_grad:
                    ad.deposit(bias, gm.sum(axis=0) if batched else gm)
                gh = gm @ weight.value
            if gated.requires_grad:
                ad.deposit(gated, gh)
        out._backward = _bw
    return out


def new_state(lanes: int, baseline: float = 1e-6) -> MotorState:
    """Empty pool for ``lanes`` parallel trips."""
    if lanes < 1:
        raise ShapeError(f"need at least one lane, got {lanes}")
    if baseline <= 0.0:
        raise ValueError(f"baseline must be positive, got {baseline}")
    return MotorState(
        lanes=lanes,
        baseline=baseline,
        magnitudes=None,
        rates=None,
        directions=np.zeros((0, lanes)),
        start_times=np.zeros(0),
        fold_times=np.zeros(0),
        settled=Tensor(np.zeros(lanes)),
    )


def evaluate(state: MotorState, t: float) -> Tensor:
    """Trajectory value at time ``t``: settled offset plus all pulls.

    Evaluating the pool is the single hottest operation in a simulated
    trip (once per control per step), so the pull formula is one fused
    graph node over the stacked rows.
    """
    if state.magnitudes is None:
        return state.settled
    mags, rates, settled = state.magnitudes, state.rates, state.settled
    mv, rv, dirs = mags.value, rates.value, state.directions
    age = (float(t) - state.start_times)[:, None]
    decay = np.exp((mv + rv) * -age)
    launch_gain = mv / state.baseline
    denom = launch_gain * decay + 1.0
    value = settled.value + ((mv / denom) * dirs).sum(axis=0)

    out, live = ad.make_node(value, (mags, rates, settled))
    if live:
        def _bw():
            g = out.grad
            if settled.requires_grad:
                ad.deposit(settled, g)
            common = g[None, :] * dirs / (denom * denom)
            if mags.requires_grad:
                # d(pull)/dT with denom(T) = (T / baseline) * exp(-(T + R) * age) + 1
                ad.deposit(mags, common * (
                    denom - mv * decay * (1.0 / state.baseline - age * launch_gain)
                ))
            if rates.requires_grad:
                ad.deposit(rates, (common * (mv * age * launch_gain * decay))
                           .sum(axis=1, keepdims=True))
        out._backward = _bw
    return out


def _append_row(
    state: MotorState,
    target: Tensor,
    t: float,
    params: MotorParams,
    lanes: np.ndarray | None,
    start_value: Tensor | None,
    rate: Tensor | None,
) -> tuple[MotorState, Tensor, np.ndarray, np.ndarray]:
    """Shared launch body for :func:`trigger` and
    :func:`trigger_with_value`.

    Returns ``(new_state, y0, directions, magnitudes)``; a fully masked
    or exactly-zero launch returns the state unchanged with empty
    direction/magnitude arrays. Appending the new row to the stacked
    pool arrays is fused into one graph node per array, so a launch adds
    two nodes instead of a build-then-concatenate chain.
    """
    if target.value.ndim == 0:
        target = ad.reshape(target, (1,))
    if target.value.shape != (state.lanes,):
        raise ShapeError(
            f"target has shape {target.value.shape}, state has {state.lanes} lanes"
        )
    if not np.all(np.isfinite(target.value)):
        raise NumericError(f"non-finite launch target at t={t}")

    y0 = evaluate(state, t) if start_value is None else start_value
    delta = target.value - y0.value
    directions = np.sign(delta)
    mag_vals = np.abs(delta)
    if lanes is not None:
        picked = np.asarray(lanes, dtype=np.float64)
        if picked.shape != (state.lanes,):
            raise ShapeError(
                f"lane mask has shape {picked.shape}, state has {state.lanes} lanes"
            )
        mag_vals = mag_vals * picked
        directions = directions * picked
    empty = np.zeros(0)
    if not directions.any():
        return state, y0, empty, empty

    old_mags, old_rates = state.magnitudes, state.rates
    if old_mags is None:
        mag_value = mag_vals[None, :]
        mag_parents: tuple[Tensor, ...] = (target, y0)
    else:
        mag_value = np.concatenate([old_mags.value, mag_vals[None, :]], axis=0)
        mag_parents = (old_mags, target, y0)
    magnitudes, live = ad.make_node(mag_value, mag_parents)
    if live:
        def _bw():
            g = magnitudes.grad
            if old_mags is not None and old_mags.requires_grad:
                ad.deposit(old_mags, g[:-1])
            g_row = g[-1] * directions
            if target.requires_grad:
                ad.deposit(target, g_row)
            if y0.requires_grad:
                ad.deposit(y0, -g_row)
        magnitudes._backward = _bw

    rate_node = ad.exp(params.rate_raw) if rate is None else rate
    rate_value = float(rate_node.value)
    if old_rates is None:
        rate_arr = np.full((1, 1), rate_value)
        rate_parents: tuple[Tensor, ...] = (rate_node,)
    else:
        rate_arr = np.concatenate([old_rates.value, np.full((1, 1), rate_value)], axis=0)
        rate_parents = (old_rates, rate_node)
    rates, live = ad.make_node(rate_arr, rate_parents)
    if live:
        def _bw_rates():
            g = rates.grad
            if old_rates is not None and old_rates.requires_grad:
                ad.deposit(old_rates, g[:-1])
            if rate_node.requires_grad:
                ad.deposit(rate_node, g[-1].reshape(rate_node.value.shape))
        rates._backward = _bw_rates

    slowest = float(mag_vals[directions != 0.0].min())
    record = MotorPrimitive(
        magnitude=mag_vals.copy(),
        direction=directions.copy(),
        gain=mag_vals / state.baseline,
        rate=rate_value,
        start_time=float(t),
        start_value=y0.value.copy(),
    )
    new_state = replace(
        state,
        magnitudes=magnitudes,
        rates=rates,
        directions=np.concatenate([state.directions, directions[None]], axis=0),
        start_times=np.append(state.start_times, float(t)),
        fold_times=np.append(
            state.fold_times, float(t) + FOLD_EXPONENT / (slowest + rate_value)
        ),
        active=state.active + (record,),
    )
    return new_state, y0, directions, mag_vals


def trigger(
    state: MotorState,
    target: Tensor,
    t: float,
    params: MotorParams,
    *,
    lanes: np.ndarray | None = None,
    start_value: Tensor | None = None,
    rate: Tensor | None = None,
) -> MotorState:
    """Launch one primitive row toward ``target`` at time ``t``.

    ``lanes`` optionally restricts the launch to a boolean subset of
    trips; other lanes get an exactly-zero row. ``start_value`` lets the
    caller pass an already-computed ``evaluate(state, t)``, and ``rate``
    an already-computed ``exp(rate_raw)``, so shared nodes are reused. A
    launch whose deltas are all exactly zero (or fully masked) returns
    the state unchanged, bit for bit.
    """
    new_state, _, _, _ = _append_row(state, target, t, params, lanes, start_value, rate)
    return new_state


def trigger_with_value(
    state: MotorState,
    target: Tensor,
    t: float,
    params: MotorParams,
    *,
    lanes: np.ndarray | None = None,
    start_value: Tensor | None = None,
    rate: Tensor | None = None,
) -> tuple[MotorState, Tensor]:
    """:func:`trigger`, also returning the trajectory value at ``t``.

    At the launch instant the freshly appended row contributes its
    launch-floor pull ``direction * T * b / (T + b)``, so the pool value
    is the pre-launch value plus that one term. Computing it directly
    from ``(start_value, target)`` skips re-evaluating the whole pool,
    which matters because the simulation loop needs the value at every
    launch step.
    """
    new_state, y0, directions, mag_vals = _append_row(
        state, target, t, params, lanes, start_value, rate
    )
    if directions.size == 0:
        return new_state, y0
    b = state.baseline
    value = y0.value + directions * mag_vals * b / (mag_vals + b)
    out, live = ad.make_node(value, (y0, target))
    if live:
        # d(pull)/dT at age zero is b^2 / (T + b)^2; the lane mask rides
        # along in directions^2.
        coeff = directions * directions * (b * b) / ((mag_vals + b) ** 2)

        def _bw():
            g = out.grad
            if y0.requires_grad:
                ad.deposit(y0, g * (1.0 - coeff))
            if target.requires_grad:
                ad.deposit(target, g * coeff)
        out._backward = _bw
    return new_state, out


def compact(state: MotorState, t: float) -> MotorState:
    """Fold saturated primitives into the settled offset.

    A row whose slowest firing lane satisfies ``(T + R) * age > 45`` is
    replaced by its asymptote ``direction * T``; lanes with direction
    zero contribute exactly zero on both sides of the swap.
    """
    if state.magnitudes is None:
        return state
    due = state.fold_times <= float(t)
    if not due.any():
        return state
    keep = ~due
    asymptotes = ad.take(state.magnitudes, due) * state.directions[due]
    settled = state.settled + ad.tsum(asymptotes, axis=0)
    if keep.any():
        magnitudes = ad.take(state.magnitudes, keep)
        rates = ad.take(state.rates, keep)
    else:
        magnitudes = None
        rates = None
    return replace(
        state,
        magnitudes=magnitudes,
        rates=rates,
        directions=state.directions[keep],
        start_times=state.start_times[keep],
        fold_times=state.fold_times[keep],
        settled=settled,
        active=tuple(r for r, kept in zip(state.active, keep) if kept),
    )
