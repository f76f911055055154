"""Versioned plain-text checkpoints.

A checkpoint is a single UTF-8 text document holding the model config,
the fitted scalers, the driver vocabulary, training metadata, and every
parameter array flattened row-major. All floats are written as decimal
scientific notation with 17 significant digits, which round-trips IEEE
64-bit values exactly: save -> load -> predict is bit-identical to
predicting in memory.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .autodiff import Tensor
from .data import Scalers
from .errors import CheckpointError
from .model import ModelConfig, ModelParams, init_params, named_parameters
from .personalization import EmbeddingTable

FORMAT_TAG = "spikedriver-checkpoint"
FORMAT_VERSION = 1

_CONFIG_INTS = ("channels", "expand_factor", "compress_factor", "embed_width", "seed")
_CONFIG_FLOATS = ("dt", "threshold", "sharpness", "primitive_floor")
_SCALER_FIELDS = ("input_mean", "input_std", "output_min", "output_max")


@dataclass
class Checkpoint:
    """Everything needed to run the model on new data."""

    config: ModelConfig
    scalers: Scalers
    params: ModelParams
    best_epoch: int
    best_val_loss: float
    holdout: str | None = None


def _fmt(x: float) -> str:
    return "%.17e" % float(x)


def _fmt_array(arr: np.ndarray) -> str:
    return " ".join(_fmt(v) for v in np.asarray(arr).reshape(-1))


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    lines = [f"{FORMAT_TAG} v{FORMAT_VERSION}", "[config]"]
    for name in _CONFIG_INTS:
        lines.append(f"{name} {getattr(ckpt.config, name)}")
    for name in _CONFIG_FLOATS:
        lines.append(f"{name} {_fmt(getattr(ckpt.config, name))}")
    lines.append("motor_hidden " + " ".join(str(w) for w in ckpt.config.motor_hidden))

    lines.append("[meta]")
    lines.append(f"best_epoch {ckpt.best_epoch}")
    lines.append(f"best_val_loss {_fmt(ckpt.best_val_loss)}")
    lines.append(f"holdout {ckpt.holdout if ckpt.holdout is not None else '-'}")

    lines.append("[scalers]")
    for name in _SCALER_FIELDS:
        arr = getattr(ckpt.scalers, name)
        lines.append(f"{name} {arr.size} {_fmt_array(arr)}")

    vocabulary = sorted(ckpt.params.embeddings.vocabulary, key=ckpt.params.embeddings.vocabulary.get)
    lines.append("[vocabulary]")
    lines.append(f"count {len(vocabulary)}")
    for driver_id in vocabulary:
        if "\n" in driver_id or "\r" in driver_id:
            raise CheckpointError(f"driver id {driver_id!r} contains a newline")
        lines.append(driver_id)

    named = named_parameters(ckpt.params)
    lines.append("[parameters]")
    lines.append(f"count {len(named)}")
    for name, tensor in named:
        shape = " ".join(str(d) for d in tensor.value.shape)
        lines.append(f"{name} {tensor.value.ndim} {shape}".rstrip())
        lines.append(_fmt_array(tensor.value))
    lines.append("[end]")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


class _Reader:
    def __init__(self, path: Path):
        self.path = path
        self.lines = path.read_text(encoding="utf-8").splitlines()
        self.pos = 0

    def next(self) -> str:
        if self.pos >= len(self.lines):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        line = self.lines[self.pos]
        self.pos += 1
        return line

    def expect(self, literal: str) -> None:
        line = self.next()
        if line != literal:
            raise CheckpointError(
                f"{self.path}:{self.pos}: expected {literal!r}, found {line!r}"
            )

    def keyed(self, key: str) -> str:
        line = self.next()
        head, _, rest = line.partition(" ")
        if head != key:
            raise CheckpointError(
                f"{self.path}:{self.pos}: expected field {key!r}, found {head!r}"
            )
        return rest


def _parse_floats(reader: _Reader, text: str, count: int) -> np.ndarray:
    parts = text.split()
    if len(parts) != count:
        raise CheckpointError(
            f"{reader.path}:{reader.pos}: expected {count} values, got {len(parts)}"
        )
    try:
        return np.array([float(p) for p in parts])
    except ValueError as exc:
        raise CheckpointError(f"{reader.path}:{reader.pos}: {exc}") from None


def load_checkpoint(path: str | Path) -> Checkpoint:
    reader = _Reader(Path(path))
    reader.expect(f"{FORMAT_TAG} v{FORMAT_VERSION}")

    reader.expect("[config]")
    kwargs: dict = {}
    for name in _CONFIG_INTS:
        kwargs[name] = int(reader.keyed(name))
    for name in _CONFIG_FLOATS:
        kwargs[name] = float(reader.keyed(name))
    kwargs["motor_hidden"] = tuple(int(w) for w in reader.keyed("motor_hidden").split())
    try:
        config = ModelConfig(**kwargs)
    except ValueError as exc:
        raise CheckpointError(f"{reader.path}: bad config: {exc}") from None

    reader.expect("[meta]")
    best_epoch = int(reader.keyed("best_epoch"))
    best_val_loss = float(reader.keyed("best_val_loss"))
    holdout_text = reader.keyed("holdout")
    holdout = None if holdout_text == "-" else holdout_text

    reader.expect("[scalers]")
    scaler_values = {}
    for name in _SCALER_FIELDS:
        rest = reader.keyed(name)
        count_text, _, payload = rest.partition(" ")
        scaler_values[name] = _parse_floats(reader, payload, int(count_text))
    scalers = Scalers(**scaler_values)

    reader.expect("[vocabulary]")
    n_vocab = int(reader.keyed("count"))
    vocabulary = [reader.next() for _ in range(n_vocab)]
    if len(set(vocabulary)) != n_vocab:
        raise CheckpointError(f"{reader.path}: duplicate driver ids in vocabulary")

    params = init_params(config, vocabulary or ["__none__"])
    params.embeddings = EmbeddingTable(
        vocabulary={driver_id: i for i, driver_id in enumerate(vocabulary)},
        rows=Tensor(np.zeros((max(n_vocab, 1), config.embed_width)), requires_grad=True),
    )

    reader.expect("[parameters]")
    n_params = int(reader.keyed("count"))
    named = dict(named_parameters(params))
    if n_params != len(named):
        raise CheckpointError(
            f"{reader.path}: checkpoint has {n_params} parameter groups, "
            f"model expects {len(named)}"
        )
    for _ in range(n_params):
        header = reader.next().split()
        if len(header) < 2:
            raise CheckpointError(f"{reader.path}:{reader.pos}: bad parameter header")
        name, ndim = header[0], int(header[1])
        shape = tuple(int(d) for d in header[2 : 2 + ndim])
        if name not in named:
            raise CheckpointError(f"{reader.path}:{reader.pos}: unknown parameter {name!r}")
        tensor = named[name]
        if shape != tensor.value.shape:
            raise CheckpointError(
                f"{reader.path}:{reader.pos}: parameter {name!r} has shape {shape}, "
                f"model expects {tensor.value.shape}"
            )
        flat = _parse_floats(reader, reader.next(), int(np.prod(shape, dtype=int)))
        tensor.value = flat.reshape(shape)
    reader.expect("[end]")

    return Checkpoint(
        config=config,
        scalers=scalers,
        params=params,
        best_epoch=best_epoch,
        best_val_loss=best_val_loss,
        holdout=holdout,
    )
