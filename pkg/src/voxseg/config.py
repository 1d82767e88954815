"""Experiment configuration: one JSON file, fully validated and defaulted.

Every experiment is described by a single JSON document with a
``schema_version`` field. Validation is total: any input either yields a
fully defaulted :class:`ExperimentConfig` or a :class:`ConfigError` naming
the exact key path. The defaulted document is fingerprinted (sha256 over a
key-sorted dump) so checkpoints can detect config drift on resume.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

SCHEMA_VERSION = 1

_ARCHITECTURES = ("unet2d", "unet3d", "film_unet", "attention_unet", "hemis_unet")
_LOSS_NAMES = ("dice", "cross_entropy", "focal", "focal_dice", "adaptive_wing", "l2")
_TRANSFORM_NAMES = (
    "resample", "crop_or_pad", "normalize_zscore", "intensity_adjust",
    "dilate_ground_truth", "affine_augment", "elastic_augment",
)
_POSTPROCESS_NAMES = (
    "threshold", "fill_holes", "remove_small", "keep_largest", "uncertainty_threshold",
)
_MEASURES = ("entropy", "variance", "cv")

_NUMBER = (int, float)


@dataclass
class Field:
    types: tuple
    default: object = None
    required: bool = False
    nullable: bool = False
    choices: tuple | None = None
    elem_types: tuple | None = None
    elem_choices: tuple | None = None


def _schema() -> dict:
    return {
        "schema_version": Field((int,), required=True),
        "loader": {
            "bids_path": Field((str,), nullable=True, default=None),
            "target_suffix": Field((list,), default=["seg"], elem_types=(str,)),
            "contrasts": {
                "train": Field((list,), default=["T2w"], elem_types=(str,)),
                "test": Field((list,), default=["T2w"], elem_types=(str,)),
            },
            "mode": Field((str,), default="slice", choices=("volume", "slice", "patch")),
            "slice_axis": Field((int,), default=2, choices=(0, 1, 2)),
            "patch_shape": Field((list,), nullable=True, default=None, elem_types=(int,)),
            "stride": Field((list, int), nullable=True, default=None, elem_types=(int,)),
            "multichannel": Field((bool,), default=False),
            "balance_key": Field((str,), nullable=True, default=None),
        },
        "split": {
            "fractions": Field((list,), default=[0.6, 0.2, 0.2], elem_types=_NUMBER),
            "seed": Field((int,), default=42),
            "split_key": Field((str,), nullable=True, default=None),
        },
        "transforms": Field((list,), default=[], elem_types=(dict,)),
        "model": {
            "architecture": Field((str,), default="unet2d", choices=_ARCHITECTURES),
            "depth": Field((int,), default=3),
            "base_filters": Field((int,), default=16),
            "in_channels": Field((int,), default=1),
            "out_classes": Field((int,), default=1),
            "dropout_rate": Field(_NUMBER, default=0.3),
            "film_layers": Field((list,), default=[], elem_types=(bool,)),
            "film_metadata_key": Field((str,), nullable=True, default=None),
            "n_modalities": Field((int,), default=1),
        },
        "training": {
            "loss": {
                "name": Field((str,), default="dice", choices=_LOSS_NAMES),
                "params": Field((dict,), default={}),
            },
            "lr": Field(_NUMBER, default=1e-3),
            "epochs": Field((int,), default=10),
            "batch_size": Field((int,), default=4),
            "mixup_beta": Field(_NUMBER, nullable=True, default=None),
            "freeze_pattern": Field((str,), nullable=True, default=None),
            "deterministic": Field((bool,), default=True),
            "resume": Field((str,), nullable=True, default=None),
            "curriculum": {
                "warmup_epochs": Field((int,), nullable=True, default=None),
                "p_max": Field(_NUMBER, default=0.0),
                "anchor_modality": Field((int,), default=0),
            },
        },
        "cascade": {
            "detector_path": Field((str,), nullable=True, default=None),
            "margin_voxels": Field((int,), default=8),
        },
        "uncertainty": {
            "mode": Field((str,), nullable=True, default=None,
                          choices=("epistemic", "aleatoric")),
            "n_samples": Field((int,), default=10),
            "measures": Field((list,), default=["entropy"], elem_types=(str,),
                              elem_choices=_MEASURES),
        },
        "evaluation": {
            "threshold": Field((str,) + _NUMBER, default=0.5),
            "search_step": Field(_NUMBER, default=0.05),
            "criterion": Field((str,), default="metric_max", choices=("metric_max", "roc")),
            "bins_mm3": Field((list,), nullable=True, default=None, elem_types=_NUMBER),
            "postprocess": Field((list,), default=[], elem_types=(dict,)),
        },
        "output": {
            "path": Field((str,), default="voxseg_output"),
            "save_curves": Field((bool,), default=True),
            "save_qc": Field((bool,), default=False),
        },
    }


def _type_ok(value, types) -> bool:
    if isinstance(value, bool):
        return bool in types
    return isinstance(value, tuple(t for t in types if t is not bool))


def _type_names(types) -> str:
    return "/".join(t.__name__ for t in types)


def _validate_field(value, spec: Field, path: str):
    if value is None:
        if spec.nullable:
            return None
        raise ConfigError(f"{path}: may not be null")
    if not _type_ok(value, spec.types):
        raise ConfigError(
            f"{path}: expected {_type_names(spec.types)}, got {type(value).__name__}"
        )
    if spec.choices is not None and value not in spec.choices:
        raise ConfigError(f"{path}: must be one of {list(spec.choices)}, got {value!r}")
    if isinstance(value, list) and spec.elem_types is not None:
        for i, item in enumerate(value):
            if not _type_ok(item, spec.elem_types):
                raise ConfigError(
                    f"{path}[{i}]: expected {_type_names(spec.elem_types)}, "
                    f"got {type(item).__name__}"
                )
            if spec.elem_choices is not None and item not in spec.elem_choices:
                raise ConfigError(
                    f"{path}[{i}]: must be one of {list(spec.elem_choices)}, got {item!r}"
                )
    return value


def _walk(data, schema: dict, path: str) -> dict:
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    unknown = sorted(set(data) - set(schema))
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(f"unknown key {where!r}")
    out = {}
    for key, spec in schema.items():
        sub_path = f"{path}.{key}" if path else key
        if isinstance(spec, dict):
            out[key] = _walk(data.get(key, {}), spec, sub_path)
        else:
            if key not in data:
                if spec.required:
                    raise ConfigError(f"{sub_path}: required key missing")
                out[key] = copy.deepcopy(spec.default)
            else:
                out[key] = _validate_field(data[key], spec, sub_path)
    return out


def _named_list(items, allowed, path: str, kind: str):
    for i, item in enumerate(items):
        if not isinstance(item, dict) or "name" not in item:
            raise ConfigError(f"{path}[{i}]: each {kind} needs a 'name' key")
        if item["name"] not in allowed:
            raise ConfigError(
                f"{path}[{i}].name: unknown {kind} {item['name']!r}; "
                f"choose from {list(allowed)}"
            )
        extra = set(item) - {"name", "params"}
        if extra:
            raise ConfigError(f"{path}[{i}].{sorted(extra)[0]}: unknown key")
        if "params" in item and not isinstance(item["params"], dict):
            raise ConfigError(f"{path}[{i}].params: expected dict")


def _cross_validate(cfg: dict) -> None:
    if cfg["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(
            f"schema_version: expected {SCHEMA_VERSION}, got {cfg['schema_version']}"
        )

    loader, model, training = cfg["loader"], cfg["model"], cfg["training"]
    if loader["mode"] == "patch" and loader["patch_shape"] is None:
        raise ConfigError("loader.patch_shape: required when loader.mode is 'patch'")
    if loader["patch_shape"] is not None and len(loader["patch_shape"]) != 3:
        raise ConfigError("loader.patch_shape: expected three dimensions")

    fractions = cfg["split"]["fractions"]
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ConfigError("split.fractions: expected three non-negative numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split.fractions: must sum to 1, got {sum(fractions)}")

    _named_list(cfg["transforms"], _TRANSFORM_NAMES, "transforms", "transform")
    _named_list(cfg["evaluation"]["postprocess"], _POSTPROCESS_NAMES,
                "evaluation.postprocess", "postprocess step")

    if model["architecture"] == "film_unet" and model["film_metadata_key"] is None:
        raise ConfigError("model.film_metadata_key: required for film_unet")
    if model["film_metadata_key"] is not None and model["architecture"] != "film_unet":
        raise ConfigError("model.film_metadata_key: only valid with architecture film_unet")
    if model["film_layers"] and model["architecture"] != "film_unet":
        raise ConfigError("model.film_layers: only valid with architecture film_unet")
    if model["depth"] < 1:
        raise ConfigError("model.depth: must be >= 1")
    if not 0.0 <= model["dropout_rate"] < 1.0:
        raise ConfigError("model.dropout_rate: must lie in [0, 1)")
    if model["out_classes"] != len(loader["target_suffix"]):
        raise ConfigError(
            "model.out_classes: must equal the number of loader.target_suffix entries"
        )
    if model["architecture"] == "hemis_unet":
        if not loader["multichannel"]:
            raise ConfigError("loader.multichannel: hemis_unet requires true")
        if model["n_modalities"] != len(loader["contrasts"]["train"]):
            raise ConfigError(
                "model.n_modalities: must equal the number of training contrasts"
            )
    if loader["multichannel"] and model["architecture"] != "hemis_unet":
        if model["in_channels"] != len(loader["contrasts"]["train"]):
            raise ConfigError(
                "model.in_channels: must equal the number of training contrasts "
                "when loader.multichannel is true"
            )

    if training["lr"] <= 0:
        raise ConfigError("training.lr: must be > 0")
    if training["epochs"] < 1:
        raise ConfigError("training.epochs: must be >= 1")
    if training["batch_size"] < 1:
        raise ConfigError("training.batch_size: must be >= 1")
    if training["mixup_beta"] is not None and training["mixup_beta"] <= 0:
        raise ConfigError("training.mixup_beta: must be > 0 or null")
    if not 0.0 <= training["curriculum"]["p_max"] < 1.0:
        raise ConfigError("training.curriculum.p_max: must lie in [0, 1)")

    unc = cfg["uncertainty"]
    if unc["n_samples"] < 2:
        raise ConfigError("uncertainty.n_samples: must be >= 2")
    if unc["mode"] == "epistemic" and model["dropout_rate"] <= 0:
        raise ConfigError(
            "uncertainty.mode: epistemic requires model.dropout_rate > 0"
        )
    if unc["mode"] == "aleatoric" and not any(
        t["name"] == "affine_augment" for t in cfg["transforms"]
    ):
        raise ConfigError(
            "uncertainty.mode: aleatoric requires an invertible augmentation "
            "(affine_augment) in transforms"
        )

    ev = cfg["evaluation"]
    if isinstance(ev["threshold"], str):
        if ev["threshold"] != "search":
            raise ConfigError("evaluation.threshold: a number in (0, 1) or 'search'")
    elif not 0.0 < ev["threshold"] < 1.0:
        raise ConfigError("evaluation.threshold: must lie in (0, 1)")
    if not 0.0 < ev["search_step"] < 1.0:
        raise ConfigError("evaluation.search_step: must lie in (0, 1)")
    if ev["bins_mm3"] is not None:
        bins = ev["bins_mm3"]
        if len(bins) < 2 or any(nxt <= prev for prev, nxt in zip(bins, bins[1:])):
            raise ConfigError("evaluation.bins_mm3: expected >= 2 strictly increasing edges")
    if cfg["cascade"]["margin_voxels"] < 0:
        raise ConfigError("cascade.margin_voxels: must be >= 0")


class ExperimentConfig:
    """Validated, fully defaulted experiment description."""

    def __init__(self, data: dict):
        cfg = _walk(data, _schema(), "")
        _cross_validate(cfg)
        self.raw = cfg
        # The resume pointer names where a run continues from, not what the
        # experiment is, so it stays out of the identity hash.
        stable = copy.deepcopy(cfg)
        stable["training"]["resume"] = None
        canonical = json.dumps(stable, sort_keys=True, separators=(",", ":"))
        self.fingerprint = hashlib.sha256(canonical.encode()).hexdigest()

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def loader(self) -> dict:
        return self.raw["loader"]

    @property
    def split(self) -> dict:
        return self.raw["split"]

    @property
    def transforms(self) -> list:
        return self.raw["transforms"]

    @property
    def model(self) -> dict:
        return self.raw["model"]

    @property
    def training(self) -> dict:
        return self.raw["training"]

    @property
    def cascade(self) -> dict:
        return self.raw["cascade"]

    @property
    def uncertainty(self) -> dict:
        return self.raw["uncertainty"]

    @property
    def evaluation(self) -> dict:
        return self.raw["evaluation"]

    @property
    def output(self) -> dict:
        return self.raw["output"]

    def model_spec(self):
        from .models import ModelSpec

        m = self.model
        return ModelSpec(
            architecture=m["architecture"],
            depth=m["depth"],
            base_filters=m["base_filters"],
            in_channels=m["in_channels"],
            out_classes=m["out_classes"],
            dropout_rate=m["dropout_rate"],
            film_layers=list(m["film_layers"]),
            film_metadata_key=m["film_metadata_key"],
            n_modalities=m["n_modalities"],
        )


def load_config(path) -> ExperimentConfig:
    """Parse and validate a config file; every failure names its location."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc
    return ExperimentConfig(data)


def override_config(raw: dict, overrides: dict) -> dict:
    """Apply dotted-path overrides (e.g. ``{"training.lr": 0.01}``) to a raw
    config dict, validating key paths against the schema."""
    out = copy.deepcopy(raw)
    schema = _schema()
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node, snode = out, schema
        for part in parts[:-1]:
            if not isinstance(snode, dict) or part not in snode:
                raise ConfigError(f"override key {dotted!r}: no such config path")
            snode = snode[part]
            node = node.setdefault(part, {})
        leaf = parts[-1]
        if not isinstance(snode, dict) or leaf not in snode:
            raise ConfigError(f"override key {dotted!r}: no such config path")
        node[leaf] = value
    return out
