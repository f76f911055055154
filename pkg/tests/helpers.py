"""Shared test utilities: finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

import spikedriver.autodiff as ad
from spikedriver.autodiff import Tensor


def central_difference(
    f: Callable[[], float], flat: np.ndarray, i: int, eps: float
) -> float:
    """Two-sided difference of a scalar function w.r.t. one coordinate of
    an array that ``f`` reads in place."""
    old = flat[i]
    flat[i] = old + eps
    up = f()
    flat[i] = old - eps
    down = f()
    flat[i] = old
    return (up - down) / (2.0 * eps)


def check_gradients(
    build: Callable[[], Tensor],
    tensors: Sequence[tuple[str, Tensor]],
    *,
    eps: float = 3e-5,
    rtol: float = 1e-4,
    floor: float = 1e-6,
) -> float:
    """Backprop through ``build()`` and compare every coordinate of every
    tensor against central differences.

    The comparison is ``|fd - bp| / max(|fd|, |bp|, floor) <= rtol``. The
    floor keeps coordinates whose true gradient sits at the finite-
    difference noise level (~1e-10 for a loss of order 1) from producing
    spurious mismatches, while still catching scale errors for any
    gradient above ``floor * rtol``. Returns the worst relative error.
    """
    for _, t in tensors:
        t.grad = None
    out = build()
    ad.backward(out)
    worst = 0.0
    for name, tensor in tensors:
        flat = tensor.value.reshape(-1)
        grad = (
            np.zeros_like(flat)
            if tensor.grad is None
            else np.asarray(tensor.grad).reshape(-1)
        )
        for i in range(flat.size):
            fd = central_difference(lambda: float(build().value), flat, i, eps)
            bp = grad[i]
            rel = abs(fd - bp) / max(abs(fd), abs(bp), floor)
            assert rel <= rtol, (
                f"gradient mismatch at {name}[{i}]: "
                f"finite-difference {fd:.10g} vs backprop {bp:.10g} (rel {rel:.3g})"
            )
            worst = max(worst, rel)
    return worst
