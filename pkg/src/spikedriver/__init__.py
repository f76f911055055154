"""Spiking evidence-accumulation driver model.

Raw sensor channels are perceived into features, conditioned on a
driver embedding, and integrated by leaky integrate-and-fire neurons;
their spikes intermittently launch logistic-growth motor primitives
that render brake, throttle, and steering trajectories. Everything is
trained end to end by backpropagation through time with a surrogate
spike gradient.
"""

from .autodiff import Tensor
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    Batch,
    Scalers,
    Trip,
    apply_scalers,
    fit_scalers,
    invert_outputs,
    load_dataset,
    pad_and_mask,
    save_dataset,
    synth_generate,
)
from .errors import (
    CheckpointError,
    DatasetError,
    DegenerateDataError,
    DegenerateMaskError,
    NumericError,
    ShapeError,
)
from .model import (
    CONTROLS,
    ModelConfig,
    ModelParams,
    SimState,
    Trace,
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
from .training import (
    AdamState,
    TrainConfig,
    TrainResult,
    adam_step,
    evaluate_mae,
    loss,
    split_leave_one_out,
    train,
    write_loss_log,
)

__all__ = [
    "Tensor",
    "Checkpoint",
    "load_checkpoint",
    "save_checkpoint",
    "Batch",
    "Scalers",
    "Trip",
    "apply_scalers",
    "fit_scalers",
    "invert_outputs",
    "load_dataset",
    "pad_and_mask",
    "save_dataset",
    "synth_generate",
    "CheckpointError",
    "DatasetError",
    "DegenerateDataError",
    "DegenerateMaskError",
    "NumericError",
    "ShapeError",
    "CONTROLS",
    "ModelConfig",
    "ModelParams",
    "SimState",
    "Trace",
    "count_params",
    "detach_params",
    "forward_batch",
    "forward_trip",
    "init_params",
    "init_state",
    "named_parameters",
    "restore_state",
    "snapshot_state",
    "AdamState",
    "TrainConfig",
    "TrainResult",
    "adam_step",
    "evaluate_mae",
    "loss",
    "split_leave_one_out",
    "train",
    "write_loss_log",
]

__version__ = "0.1.0"
