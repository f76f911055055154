"""Bank of leaky integrate-and-fire evidence accumulators.

One neuron per feature, features stay unmixed: neuron i integrates
``bias_i + gain_i * x_i`` with proportional leak, crosses a fixed
threshold, emits a binary spike, and hard-resets to a learned potential.
The reset is routed through the spike value itself
(``s * reset + (1 - s) * v``), so the reset potential receives
gradient via the spike surrogate, which is what makes it learnable.

The leak is reparameterized through softplus: a negative leak would
anti-diffuse and blow up training, so only its pre-image is learned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass
class AccumulatorParams:
    """Per-neuron charge parameters, each a vector of length k*C.

    ``leak_raw`` is the softplus pre-image of the effective leak rate
    (1/s); ``bias`` shifts the drive toward or away from threshold;
    ``gain`` is the accumulation rate per unit feature; ``reset_value`` is
    the post-spike potential.
    """

    leak_raw: Tensor
    bias: Tensor
    gain: Tensor
    reset_value: Tensor


@dataclass
class AccumulatorState:
    """Membrane potentials, zeroed at every trip start. [kC] or [N, kC]."""

    potentials: Tensor


def inverse_softplus(y: float) -> float:
    """Pre-image x with softplus(x) = y, for initializing the leak."""
    return float(np.log(np.expm1(y)))


def init_accumulator(n_features: int, initial_leak: float = 0.1) -> AccumulatorParams:
    # Start as a pure integrator of the features: no bias, unit gain, reset to 0.
    return AccumulatorParams(
        leak_raw=Tensor(np.full(n_features, inverse_softplus(initial_leak)),
                        requires_grad=True),
        bias=Tensor(np.zeros(n_features), requires_grad=True),
        gain=Tensor(np.ones(n_features), requires_grad=True),
        reset_value=Tensor(np.zeros(n_features), requires_grad=True),
    )


def init_state(n_features: int, batch: int | None = None) -> AccumulatorState:
    shape = (n_features,) if batch is None else (batch, n_features)
    return AccumulatorState(potentials=Tensor(np.zeros(shape)))


def effective_leak(params: AccumulatorParams) -> Tensor:
    return ad.softplus(params.leak_raw)


def step(params: AccumulatorParams, state: AccumulatorState, x: Tensor, dt: float,
         *, threshold: float = 1.0, sharpness: float = 4.0,
         smooth: bool = False, leak: Tensor | None = None
         ) -> tuple[AccumulatorState, Tensor]:
    """One Euler step of every neuron; returns the new state and the spikes.

    ``v' = v + (-leak * v + bias + gain * x) * dt``, spike where
    ``v' >= threshold``, then reset. With ``smooth=True`` the hard spike
    is replaced by its sigmoid relaxation (the function whose derivative
    is the training surrogate), which is what finite-difference gradient
    checks must run against.

    ``leak`` may carry a precomputed ``softplus(leak_raw)`` so a closed
    loop over many timesteps shares one node.
    """
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    if sharpness <= 0.0:
        raise ValueError(f"sharpness must be positive, got {sharpness}")
    if x.value.shape != state.potentials.value.shape:
        raise ShapeError(
            f"feature shape {x.value.shape} does not match potentials "
            f"{state.potentials.value.shape}"
        )
    if leak is None:
        leak = effective_leak(params)
    pot, bias, gain, reset = state.potentials, params.bias, params.gain, params.reset_value

    # The whole update is a single fused node pair (spikes, new potentials)
    # sharing intermediates: it runs once per simulated timestep, and the
    # short tape is what keeps long-trip training affordable.
    pv, xv, bv, cv, lv, rv = (pot.value, x.value, bias.value, gain.value,
                              leak.value, reset.value)
    v_next = pv + (bv + cv * xv - lv * pv) * dt
    sig = ad.sigmoid_array(sharpness * (v_next - threshold))
    s_val = sig if smooth else np.where(v_next >= threshold, 1.0, 0.0)
    v_new = s_val * rv + (1.0 - s_val) * v_next

    spikes, live_s = ad.make_node(s_val, (pot, x, bias, gain, leak))
    new_pot, live_v = ad.make_node(v_new, (pot, x, bias, gain, leak, reset))
    if live_s or live_v:
        surrogate = sharpness * sig * (1.0 - sig)
        batched = v_next.ndim == 2

        def _per_neuron(g):
            # parameters are per-neuron vectors; fold the batch axis if present
            return g.sum(axis=0) if batched else g

        def _chain(g_next):
            # common backward through v_next into state and charge parameters
            if pot.requires_grad:
                ad.deposit(pot, g_next * (1.0 - lv * dt))
            if x.requires_grad:
                ad.deposit(x, g_next * (cv * dt))
            if bias.requires_grad:
                ad.deposit(bias, _per_neuron(g_next) * dt)
            if gain.requires_grad:
                ad.deposit(gain, _per_neuron(g_next * xv) * dt)
            if leak.requires_grad:
                ad.deposit(leak, _per_neuron(g_next * pv) * -dt)

        if live_s:
            def _bw_spikes():
                _chain(spikes.grad * surrogate)
            spikes._backward = _bw_spikes
        if live_v:
            def _bw_pot():
                g = new_pot.grad
                _chain(g * ((1.0 - s_val) + (rv - v_next) * surrogate))
                if reset.requires_grad:
                    ad.deposit(reset, _per_neuron(g * s_val))
            new_pot._backward = _bw_pot
    return AccumulatorState(potentials=new_pot), spikes
