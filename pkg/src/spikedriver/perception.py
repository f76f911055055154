"""Sensor-to-feature front end.

Two fully connected layers turn the raw input channels at one timestamp
into a wider bank of saturated nonlinear features: the first layer
expands the C channels by a factor m, the second compresses to k*C.
Mish sits between the layers so that units keep a small gradient on
negative drive; the output tanh caps every feature in (-1, 1) the way a
saturating sensor would.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass
class PerceptionParams:
    """Weights of the two-layer feature extractor.

    expand_weight: [m*C, C], compress_weight: [k*C, m*C], biases to match.
    """

    expand_weight: Tensor
    expand_bias: Tensor
    compress_weight: Tensor
    compress_bias: Tensor


def uniform_fan_in(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Layer init: uniform in +-1/sqrt(fan_in), keeps pre-activations moderate."""
    bound = 1.0 / np.sqrt(cols)
    return rng.uniform(-bound, bound, size=(rows, cols))


def init_perception(channels: int, expand_factor: int, compress_factor: int,
                    rng: np.random.Generator) -> PerceptionParams:
    mid = expand_factor * channels
    out = compress_factor * channels
    return PerceptionParams(
        expand_weight=Tensor(uniform_fan_in(rng, mid, channels), requires_grad=True),
        expand_bias=Tensor(np.zeros(mid), requires_grad=True),
        compress_weight=Tensor(uniform_fan_in(rng, out, mid), requires_grad=True),
        compress_bias=Tensor(np.zeros(out), requires_grad=True),
    )


def perceive(params: PerceptionParams, x: Tensor) -> Tensor:
    """Map standardized channels [C] (or a batch [N, C]) to features in (-1, 1).

    Computes ``tanh(compress(mish(expand(x))))`` as one fused graph node:
    this runs once per timestep, so collapsing the four elementary
    operations into one keeps the tape short over long trips.
    """
    w1, b1 = params.expand_weight, params.expand_bias
    w2, b2 = params.compress_weight, params.compress_bias
    channels = w1.value.shape[1]
    if x.value.shape[-1] != channels:
        raise ShapeError(
            f"perceive expected {channels} input channels, got shape {x.value.shape}"
        )
    xv = x.value
    batched = xv.ndim == 2
    pre1 = xv @ w1.value.T + b1.value
    squash = np.tanh(ad.softplus_array(pre1))
    hidden = pre1 * squash  # mish
    pre2 = hidden @ w2.value.T + b2.value
    value = np.tanh(pre2)

    out, live = ad.make_node(value, (w1, b1, w2, b2, x))
    if live:
        def _bw():
            g2 = out.grad * (1.0 - value * value)
            if w2.requires_grad:
                ad.deposit(w2, g2.T @ hidden if batched else np.outer(g2, hidden))
            if b2.requires_grad:
                ad.deposit(b2, g2.sum(axis=0) if batched else g2)
            g1 = (g2 @ w2.value) * (
                squash + pre1 * (1.0 - squash * squash) * ad.sigmoid_array(pre1)
            )
            if w1.requires_grad:
                ad.deposit(w1, g1.T @ xv if batched else np.outer(g1, xv))
            if b1.requires_grad:
                ad.deposit(b1, g1.sum(axis=0) if batched else g1)
            if x.requires_grad:
                ad.deposit(x, g1 @ w1.value)
        out._backward = _bw
    return out
