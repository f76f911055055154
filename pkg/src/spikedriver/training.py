"""Full-batch gradient training with Adam and masked MAE loss.

Every epoch runs all training trips through the model in one batch,
backpropagates through every timestep, and applies one bias-corrected
Adam update. The loss is, per control, the absolute error pooled over
all valid timesteps of all trips, and the three control losses are
summed. Validation (the held-out driver's trips, scored with the
mean-embedding fallback) is computed after each update through a
constant view of the parameters, and the parameters at the minimum
validation loss are what ends up in the checkpoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint
from .data import Batch, Scalers, Trip, apply_scalers, fit_scalers, pad_and_mask
from .errors import NumericError
from .model import (
    CONTROLS,
    ModelConfig,
    ModelParams,
    detach_params,
    forward_batch,
    init_params,
    named_parameters,
    restore_state,
    snapshot_state,
)


@dataclass
class TrainConfig:
    """Optimization settings; defaults follow the package conventions:
    750 epochs of full-batch Adam at learning rate 3e-3, global gradient
    norm clipped to 1.0, no scheduler. Clipping by default keeps the
    early epochs smooth while the spike gating is still rearranging
    itself; set ``grad_clip=None`` to disable."""

    epochs: int = 750
    learning_rate: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    holdout_driver: str | None = None
    seed: int = 0
    grad_clip: float | None = 1.0
    truncation: int | None = None

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0.0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.epsilon <= 0.0:
            raise ValueError("Adam epsilon must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0.0:
            raise ValueError("grad_clip must be positive when set")
        if self.truncation is not None and self.truncation < 1:
            raise ValueError("truncation window must be >= 1 when set")


@dataclass
class AdamState:
    """Per-parameter first/second moment estimates plus the step count."""

    first: dict[str, np.ndarray]
    second: dict[str, np.ndarray]
    step: int = 0


def init_adam(named: Sequence[tuple[str, Tensor]]) -> AdamState:
    return AdamState(
        first={name: np.zeros_like(t.value) for name, t in named},
        second={name: np.zeros_like(t.value) for name, t in named},
    )


def loss(
    predictions: Mapping[str, Tensor],
    observed: np.ndarray,
    mask: np.ndarray,
) -> Tensor:
    """Sum over controls of the pooled masked mean absolute error.

    ``observed`` is [N, T, 3] in control order (brake, throttle, steer),
    ``mask`` is [N, T] with 1.0 on valid steps.
    """
    observed = np.asarray(observed, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if observed.ndim != 3 or observed.shape[0] == 0:
        raise ValueError(
            f"observations must be a non-empty [N, T, 3], got {observed.shape}"
        )
    total = None
    for i, control in enumerate(CONTROLS):
        term = ad.masked_mae(predictions[control], observed[:, :, i], mask)
        total = term if total is None else total + term
    return total


def adam_step(
    state: AdamState,
    named: Sequence[tuple[str, Tensor]],
    config: TrainConfig,
) -> None:
    """One in-place bias-corrected Adam update over all parameters.

    A missing gradient counts as zero; a non-finite one aborts with the
    parameter group's name. In-place value updates keep detached
    parameter views current.
    """
    grads: dict[str, np.ndarray] = {}
    for name, tensor in named:
        g = tensor.grad
        if g is None:
            g = np.zeros_like(tensor.value)
        elif not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter group {name!r}")
        grads[name] = g

    if config.grad_clip is not None:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > config.grad_clip:
            scale = config.grad_clip / norm
            grads = {name: g * scale for name, g in grads.items()}

    state.step += 1
    correction1 = 1.0 - config.beta1 ** state.step
    correction2 = 1.0 - config.beta2 ** state.step
    for name, tensor in named:
        g = grads[name]
        m = state.first[name]
        v = state.second[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * g * g
        update = (m / correction1) / (np.sqrt(v / correction2) + config.epsilon)
        tensor.value -= config.learning_rate * update


def split_leave_one_out(
    dataset: Sequence[Trip], driver: str
) -> tuple[list[Trip], list[Trip]]:
    """All of ``driver``'s trips become validation; the rest train."""
    available = sorted({t.driver_id for t in dataset})
    if driver not in available:
        raise ValueError(f"unknown driver {driver!r}; available: {available}")
    train = [t for t in dataset if t.driver_id != driver]
    val = [t for t in dataset if t.driver_id == driver]
    return train, val


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    final_params: ModelParams
    log: list[tuple[int, float, float]] = field(default_factory=list)
    diverged_at: int | None = None
    message: str | None = None


def write_loss_log(path: str | Path, log: Sequence[tuple[int, float, float]]) -> None:
    lines = ["epoch,train_loss,val_loss"]
    for epoch, train_loss, val_loss in log:
        lines.append("%d,%.17e,%.17e" % (epoch, train_loss, val_loss))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _forward_loss(
    params: ModelParams,
    config: ModelConfig,
    batch: Batch,
    observed: np.ndarray,
    mask: np.ndarray,
    truncation: int | None,
) -> Tensor:
    """Loss over one batch; optionally with truncated backpropagation:
    the state crossing a window boundary is snapshot-restored, which
    keeps values identical but stops gradients there."""
    if truncation is None or truncation >= batch.inputs.shape[1]:
        result = forward_batch(params, config, batch.inputs, batch.driver_ids)
        predictions = result.predictions
    else:
        state = None
        chunks: dict[str, list[Tensor]] = {c: [] for c in CONTROLS}
        for start in range(0, batch.inputs.shape[1], truncation):
            piece = batch.inputs[:, start : start + truncation, :]
            result = forward_batch(
                params, config, piece, batch.driver_ids, state=state
            )
            state = restore_state(snapshot_state(result.state))
            for c in CONTROLS:
                chunks[c].append(result.predictions[c])
        predictions = {c: ad.concat(chunks[c], axis=1) for c in CONTROLS}
    return loss(predictions, observed, mask)


def train(
    dataset: Sequence[Trip],
    model_config: ModelConfig,
    train_config: TrainConfig,
) -> TrainResult:
    """Fit the model on ``dataset`` and return the best checkpoint.

    With a holdout driver, that driver's trips form the validation set
    (scored through the mean-embedding fallback) and scalers are fitted
    on the training split only. Without one, all trips train and the
    validation series simply mirrors the training loss. On divergence
    (non-finite loss or gradient) training stops and the result carries
    the best parameters seen so far plus a diagnostic message.
    """
    if not dataset:
        raise ValueError("empty dataset")
    if train_config.holdout_driver is not None:
        if len({t.driver_id for t in dataset}) < 2:
            raise ValueError("leave-one-out training needs at least 2 drivers")
        train_trips, val_trips = split_leave_one_out(
            dataset, train_config.holdout_driver
        )
    else:
        train_trips, val_trips = list(dataset), []

    scalers = fit_scalers(train_trips)
    batch = pad_and_mask(apply_scalers(scalers, train_trips))
    val_batch = None
    if val_trips:
        val_batch = pad_and_mask(apply_scalers(scalers, val_trips))

    config = model_config
    params = init_params(config, [t.driver_id for t in train_trips])
    frozen = detach_params(params)
    named = named_parameters(params)
    adam = init_adam(named)

    log: list[tuple[int, float, float]] = []
    best_val = math.inf
    best_epoch = 0
    best_values: dict[str, np.ndarray] = {name: t.value.copy() for name, t in named}
    diverged_at = None
    message = None

    for epoch in range(1, train_config.epochs + 1):
        ad.reset_grads(t for _, t in named)
        total = _forward_loss(
            params, config, batch, batch.outputs, batch.mask, train_config.truncation
        )
        train_loss = float(total.value)
        if not math.isfinite(train_loss):
            diverged_at = epoch
            message = f"non-finite training loss at epoch {epoch}"
            break
        ad.backward(total)
        try:
            adam_step(adam, named, train_config)
        except NumericError as exc:
            diverged_at = epoch
            message = f"{exc} at epoch {epoch}"
            break

        if val_batch is not None:
            val_total = _forward_loss(
                frozen, config, val_batch, val_batch.outputs, val_batch.mask, None
            )
            val_loss = float(val_total.value)
            if not math.isfinite(val_loss):
                diverged_at = epoch
                message = f"non-finite validation loss at epoch {epoch}"
                log.append((epoch, train_loss, val_loss))
                break
        else:
            val_loss = train_loss

        log.append((epoch, train_loss, val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            for name, tensor in named:
                np.copyto(best_values[name], tensor.value)

    best_params = init_params(config, [t.driver_id for t in train_trips])
    for name, tensor in named_parameters(best_params):
        np.copyto(tensor.value, best_values[name])

    ckpt = Checkpoint(
        config=config,
        scalers=scalers,
        params=best_params,
        best_epoch=best_epoch,
        best_val_loss=best_val if math.isfinite(best_val) else math.nan,
        holdout=train_config.holdout_driver,
    )
    return TrainResult(
        checkpoint=ckpt,
        final_params=params,
        log=log,
        diverged_at=diverged_at,
        message=message,
    )


def evaluate_mae(
    params: ModelParams,
    config: ModelConfig,
    scalers: Scalers,
    dataset: Sequence[Trip],
) -> dict[str, float]:
    """Per-control MAE (scaled units) pooled over all valid timesteps."""
    if not dataset:
        raise ValueError("empty dataset")
    batch = pad_and_mask(apply_scalers(scalers, dataset))
    result = forward_batch(
        detach_params(params), config, batch.inputs, batch.driver_ids
    )
    valid = batch.mask > 0.0
    count = int(valid.sum())
    maes = {}
    for i, control in enumerate(CONTROLS):
        diff = result.predictions[control].value - batch.outputs[:, :, i]
        maes[control] = float(np.abs(diff[valid]).sum() / count)
    return maes
