"""Command-line entry points: train, test, segment, automate.

Exit codes: 0 success, 1 validation problem (bad arguments, invalid
config, unreadable dataset), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config
from .errors import BidsIndexError, ConfigError
from .evaluation import postprocess, run_test, segment_volume
from .models import load_model
from .nifti import read_nifti, write_nifti
from .training import automate_grid, run_training

logger = logging.getLogger(__name__)


def _cmd_train(args) -> int:
    config = load_config(args.config)
    _, history = run_training(config)
    final = history[-1]
    print(f"trained {len(history)} epochs; "
          f"final val loss {final['val_loss']:.6g}, dice {final['val_dice']:.6g}")
    return 0


def _cmd_test(args) -> int:
    config = load_config(args.config)
    mean_dice, rows = run_test(config, args.model)
    print(f"evaluated {len({r.subject_id for r in rows})} subjects; "
          f"mean dice {mean_dice:.6g}")
    return 0


def _segment_config(model_dir: Path) -> ExperimentConfig:
    stored = model_dir / "config.json"
    if stored.exists():
        return load_config(stored)
    logger.warning("%s has no stored config; using whole-volume defaults", model_dir)
    return ExperimentConfig({"schema_version": 1, "loader": {"mode": "volume"}})


def _cmd_segment(args) -> int:
    model_dir = Path(args.model)
    model, encoder = load_model(model_dir)
    model.eval()
    config = _segment_config(model_dir)
    image = read_nifti(args.image)
    soft = segment_volume(model, image, config, metadata=None, encoder=encoder)
    threshold = config.evaluation["threshold"]
    if threshold == "search":
        threshold = 0.5
    steps = [{"name": "threshold", "params": {"t": float(threshold)}}]
    steps += [s for s in config.evaluation["postprocess"]
              if s["name"] != "uncertainty_threshold"]
    binary = postprocess(soft, steps)
    write_nifti(binary, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_automate(args) -> int:
    grid = json.loads(Path(args.grid).read_text())
    if not isinstance(grid, dict):
        raise ConfigError("grid file must hold a JSON object of key -> value list")
    for key, values in grid.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"grid entry {key!r} must map to a non-empty list")
    devices = [d.strip() for d in args.devices.split(",") if d.strip()]
    results = automate_grid(args.config, grid, devices or ["cpu"])
    print(f"wrote {results}")
    return 0


_HANDLERS = {
    "train": _cmd_train,
    "test": _cmd_test,
    "segment": _cmd_segment,
    "automate": _cmd_automate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxseg",
        description="Configuration-driven medical image segmentation.",
    )
    sub = parser.add_subparsers(dest="command")

    train = sub.add_parser("train", help="train a model from a config file")
    train.add_argument("-c", "--config", required=True, help="experiment config JSON")

    test = sub.add_parser("test", help="evaluate a model on the test bucket")
    test.add_argument("-c", "--config", required=True, help="experiment config JSON")
    test.add_argument("-m", "--model", required=True, help="serialized model directory")

    segment = sub.add_parser("segment", help="segment one image")
    segment.add_argument("-i", "--image", required=True, help="input NIfTI file")
    segment.add_argument("-m", "--model", required=True, help="serialized model directory")
    segment.add_argument("-o", "--out", required=True, help="output NIfTI path")

    automate = sub.add_parser(
        "automate", help="run a hyperparameter grid over one or more devices"
    )
    automate.add_argument("-c", "--config", required=True, help="base config JSON")
    automate.add_argument("-g", "--grid", required=True,
                          help="JSON object: dotted config path -> list of values")
    automate.add_argument("-d", "--devices", default="cpu",
                          help="comma-separated device names (default: cpu)")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _HANDLERS[args.command](args)
    except (ConfigError, BidsIndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
