"""Command-line interface.

Subcommands: ``synth`` (generate a synthetic dataset), ``train``,
``eval`` (per-control MAE), ``predict`` (trajectory CSV), ``inspect``
(per-neuron potentials and spikes for one trip), ``embed`` (1-D
principal-component projection of the driver embeddings).

Exit codes: 0 success, 1 usage or argument error, 2 data/schema error,
3 numeric failure. Every run echoes its resolved configuration to
stderr; data outputs go to files or stdout as CSV with 17-significant-
digit floats.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import personalization
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import DatasetError, NumericError
from .model import CONTROLS, ModelConfig, detach_params, forward_trip
from .training import TrainConfig, evaluate_mae, train, write_loss_log


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; this CLI reserves 2
    for data problems, so usage errors exit 1 instead."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> _Parser:
    parser = _Parser(prog="spikedriver", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory for trip CSVs")
    p.add_argument("--drivers", type=int, required=True)
    p.add_argument("--trips-per-driver", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--holdout-driver", default=None,
                   help="driver whose trips form the validation set")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grad-clip", type=float, default=None)
    p.add_argument("--truncation", type=int, default=None)
    p.add_argument("--embed-width", type=int, default=None)
    p.add_argument("--sharpness", type=float, default=None)
    p.add_argument("--dt", type=float, default=None)

    p = sub.add_parser("eval", help="per-control MAE of a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("predict", help="write predicted and observed trajectories")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("inspect", help="per-neuron potentials and spikes for one trip")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset directory containing the trip")
    p.add_argument("--trip", required=True, help="trip id to inspect")
    p.add_argument("--out", required=True)

    p = sub.add_parser("embed", help="1-D principal component of driver embeddings")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)

    return parser


def _echo_config(label: str, obj) -> None:
    for key, value in sorted(asdict(obj).items()):
        print(f"config: {label}.{key}={value}", file=sys.stderr)


def _echo_args(args: argparse.Namespace) -> None:
    for key, value in sorted(vars(args).items()):
        if key != "command" and value is not None:
            print(f"config: cli.{key}={value}", file=sys.stderr)
    print(f"config: cli.command={args.command}", file=sys.stderr)


def _cmd_synth(args) -> int:
    dataset = data_mod.synth_generate(args.drivers, args.trips_per_driver, args.seed)
    written = data_mod.save_dataset(dataset, args.out)
    print(f"wrote {len(written)} trips to {args.out}", file=sys.stderr)
    return 0


def _cmd_train(args) -> int:
    dataset = data_mod.load_dataset(args.data)
    model_kwargs = dict(seed=args.seed)
    for flag, name in (("embed_width", "embed_width"), ("sharpness", "sharpness"), ("dt", "dt")):
        if getattr(args, flag) is not None:
            model_kwargs[name] = getattr(args, flag)
    model_config = ModelConfig(**model_kwargs)
    train_kwargs = dict(holdout_driver=args.holdout_driver, seed=args.seed)
    if args.epochs is not None:
        train_kwargs["epochs"] = args.epochs
    if args.lr is not None:
        train_kwargs["learning_rate"] = args.lr
    if args.grad_clip is not None:
        train_kwargs["grad_clip"] = args.grad_clip
    if args.truncation is not None:
        train_kwargs["truncation"] = args.truncation
    train_config = TrainConfig(**train_kwargs)
    _echo_config("model", model_config)
    _echo_config("train", train_config)

    result = train(dataset, model_config, train_config)
    save_checkpoint(args.out, result.checkpoint)
    write_loss_log(str(args.out) + ".losses.csv", result.log)
    print(
        f"best epoch {result.checkpoint.best_epoch} "
        f"val loss {result.checkpoint.best_val_loss:.6g}",
        file=sys.stderr,
    )
    if result.diverged_at is not None:
        print(f"training aborted: {result.message}", file=sys.stderr)
        return 3
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    dataset = data_mod.load_dataset(args.data)
    _echo_config("model", ckpt.config)
    maes = evaluate_mae(ckpt.params, ckpt.config, ckpt.scalers, dataset)
    print("control,mae")
    for control in CONTROLS:
        print("%s,%.17e" % (control, maes[control]))
    return 0


def _cmd_predict(args) -> int:
    from .model import forward_batch

    ckpt = load_checkpoint(args.ckpt)
    dataset = data_mod.load_dataset(args.data)
    _echo_config("model", ckpt.config)
    scaled = data_mod.apply_scalers(ckpt.scalers, dataset)
    batch = data_mod.pad_and_mask(scaled)
    result = forward_batch(
        detach_params(ckpt.params), ckpt.config, batch.inputs, batch.driver_ids
    )
    lines = ["trip_id,t,brake_pred,throttle_pred,steer_pred,brake_obs,throttle_obs,steer_obs"]
    for i, trip in enumerate(scaled):
        for step in range(trip.length):
            preds = [result.predictions[c].value[i, step] for c in CONTROLS]
            obs = trip.outputs[step]
            lines.append(
                "%s,%s" % (trip.trip_id, ",".join("%.17e" % v for v in
                                                  [trip.times[step], *preds, *obs]))
            )
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote predictions for {len(scaled)} trips to {args.out}", file=sys.stderr)
    return 0


def _cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    dataset = data_mod.load_dataset(args.data)
    _echo_config("model", ckpt.config)
    matches = [t for t in dataset if t.trip_id == args.trip]
    if not matches:
        available = ", ".join(t.trip_id for t in dataset[:10])
        raise ValueError(f"trip {args.trip!r} not found; first trips: {available}")
    trip = data_mod.apply_scalers(ckpt.scalers, matches)[0]
    _, trace = forward_trip(detach_params(ckpt.params), ckpt.config, trip)
    lines = ["t,neuron,potential,spike"]
    for step in range(trace.potentials.shape[0]):
        t = trip.times[step]
        for neuron in range(trace.potentials.shape[1]):
            lines.append(
                "%.17e,%d,%.17e,%d"
                % (t, neuron, trace.potentials[step, neuron],
                   int(trace.spikes[step, neuron] > 0.5))
            )
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {trace.potentials.shape[0]} steps x "
          f"{trace.potentials.shape[1]} neurons to {args.out}", file=sys.stderr)
    return 0


def _cmd_embed(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    _echo_config("model", ckpt.config)
    table = ckpt.params.embeddings
    projection = personalization.pca_project(table, 1)
    ordered = sorted(table.vocabulary, key=table.vocabulary.get)
    lines = ["driver_id,pc1"]
    for driver_id, row in zip(ordered, projection):
        lines.append("%s,%.17e" % (driver_id, row[0]))
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(ordered)} embeddings to {args.out}", file=sys.stderr)
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "inspect": _cmd_inspect,
    "embed": _cmd_embed,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _echo_args(args)
    try:
        return _COMMANDS[args.command](args)
    except DatasetError as exc:
        print(f"spikedriver: data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"spikedriver: numeric failure: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"spikedriver: argument error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
