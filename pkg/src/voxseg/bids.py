"""Index BIDS datasets into typed records, splits, and sampling weights.

The indexer walks ``sub-*/[ses-*/]<datatype>/`` directories, tokenizes
filenames of the form ``sub-<id>[_ses-<id>][_<key>-<value>...]_<suffix>.nii[.gz]``,
matches derivative labels under ``derivatives/labels/``, and merges metadata
from JSON sidecars and ``participants.tsv``.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BidsIndexError

logger = logging.getLogger(__name__)

_IMAGE_EXTENSIONS = (".nii.gz", ".nii")
_LABELS_DIRNAME = Path("derivatives") / "labels"


@dataclass(eq=False)
class SubjectRecord:
    """One image file plus its labels and merged metadata.

    ``entities`` preserves the parsed filename tokens in order so the
    original name can be reassembled exactly.
    """

    subject_id: str
    session_id: str | None
    contrast: str
    image_path: Path
    label_paths: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    entities: dict = field(default_factory=dict)
    extension: str = ".nii.gz"


@dataclass
class DatasetSplit:
    """Subject-level train/validation/test partition."""

    train: list
    validation: list
    test: list
    seed: int
    split_key: str | None = None


def _split_extension(name: str):
    for ext in _IMAGE_EXTENSIONS:
        if name.endswith(ext):
            return name[: -len(ext)], ext
    return None, None


def parse_entities(filename: str):
    """Tokenize a BIDS filename into (entities, suffix, extension).

    Returns ``None`` when the name does not follow the grammar: leading
    ``sub-<id>``, optional ``ses-<id>`` second, then ``key-value`` pairs,
    final token a bare suffix.
    """
    stem, ext = _split_extension(filename)
    if stem is None:
        return None
    tokens = stem.split("_")
    if len(tokens) < 2:
        return None
    suffix = tokens[-1]
    if not suffix or "-" in suffix:
        return None
    entities = {}
    for pos, token in enumerate(tokens[:-1]):
        key, sep, value = token.partition("-")
        if not sep or not key or not value or key in entities:
            return None
        if pos == 0 and key != "sub":
            return None
        if key == "ses" and pos != 1:
            return None
        entities[key] = value
    return entities, suffix, ext


def build_filename(entities: dict, suffix: str, extension: str) -> str:
    """Inverse of :func:`parse_entities`."""
    parts = [f"{k}-{v}" for k, v in entities.items()]
    parts.append(suffix)
    return "_".join(parts) + extension


def _label_path(root: Path, rel_dir: Path, entities: dict, suffix: str, target: str):
    base = build_filename(entities, suffix, "") + f"_{target}"
    label_dir = root / _LABELS_DIRNAME / rel_dir
    for ext in _IMAGE_EXTENSIONS:
        candidate = label_dir / (base + ext)
        if candidate.exists():
            return candidate
    return None


def _coerce_scalar(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


def _participants_rows(root: Path) -> dict:
    """Map subject label -> row dict from participants.tsv, {} when absent."""
    tsv = root / "participants.tsv"
    if not tsv.exists():
        return {}
    rows = {}
    with open(tsv, newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        if reader.fieldnames is None or "participant_id" not in reader.fieldnames:
            raise BidsIndexError(f"{tsv} lacks a participant_id column")
        for row in reader:
            pid = (row.pop("participant_id") or "").strip()
            label = pid[len("sub-"):] if pid.startswith("sub-") else pid
            rows[label] = {k: _coerce_scalar(v) for k, v in row.items() if v != ""}
    return rows


def _find_root(image_path: Path) -> Path | None:
    for parent in image_path.parents:
        if parent.name.startswith("sub-"):
            return parent.parent
    return None


def parse_sidecar(image_path) -> dict:
    """Merge per-image JSON sidecar and the subject's participants.tsv row.

    Per-image keys win over participants values. Missing both sources yields
    an empty map with a warning.
    """
    image_path = Path(image_path)
    stem, _ = _split_extension(image_path.name)
    sidecar = image_path.with_name((stem or image_path.stem) + ".json")

    sidecar_data = None
    if sidecar.exists():
        text = sidecar.read_text()
        try:
            sidecar_data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise BidsIndexError(
                f"malformed sidecar {sidecar}: {exc.msg} at byte {exc.pos}"
            ) from exc
        if not isinstance(sidecar_data, dict):
            raise BidsIndexError(f"sidecar {sidecar} must hold a JSON object")

    row = None
    root = _find_root(image_path)
    parsed = parse_entities(image_path.name)
    if root is not None and parsed is not None:
        row = _participants_rows(root).get(parsed[0].get("sub"))

    if sidecar_data is None and row is None:
        logger.warning("no sidecar or participants entry for %s", image_path)
        return {}
    merged = dict(row or {})
    merged.update(sidecar_data or {})
    return merged


def index_dataset(root, contrasts, target_suffix) -> list:
    """Index every grammar-conforming image under ``root``.

    ``contrasts`` limits which filename suffixes are indexed.
    ``target_suffix`` (string or list) selects derivative labels; with a
    list, ``label_paths`` follows its order, skipping absent files.
    """
    root = Path(root)
    if not root.is_dir():
        raise BidsIndexError(f"dataset root {root} does not exist")
    if isinstance(target_suffix, str):
        target_suffix = [target_suffix]
    contrasts = list(contrasts)

    participants = _participants_rows(root)
    records = []
    skipped = []

    for image_path in sorted(root.rglob("*.nii*")):
        rel = image_path.relative_to(root)
        if rel.parts[0] == "derivatives":
            continue
        parsed = parse_entities(image_path.name)
        in_subject_dir = (
            len(rel.parts) >= 3
            and rel.parts[0].startswith("sub-")
            and (len(rel.parts) == 3 or rel.parts[1].startswith("ses-"))
        )
        if parsed is None or not in_subject_dir:
            skipped.append(str(rel))
            logger.warning("skipping non-BIDS file %s", rel)
            continue
        entities, suffix, ext = parsed
        if f"sub-{entities['sub']}" != rel.parts[0] or (
            "ses" in entities and f"ses-{entities['ses']}" != rel.parts[1]
        ):
            skipped.append(str(rel))
            logger.warning("skipping %s: filename entities disagree with directory", rel)
            continue
        if suffix not in contrasts:
            logger.debug("skipping %s: contrast %s not requested", rel, suffix)
            continue

        label_paths = []
        for target in target_suffix:
            found = _label_path(root, rel.parent, entities, suffix, target)
            if found is not None:
                label_paths.append(found)
        metadata = dict(participants.get(entities["sub"], {}))
        sidecar = root / rel.parent / build_filename(entities, suffix, ".json")
        if sidecar.exists():
            try:
                per_image = json.loads(sidecar.read_text())
            except json.JSONDecodeError as exc:
                raise BidsIndexError(
                    f"malformed sidecar {sidecar}: {exc.msg} at byte {exc.pos}"
                ) from exc
            metadata.update(per_image)

        records.append(
            SubjectRecord(
                subject_id=entities["sub"],
                session_id=entities.get("ses"),
                contrast=suffix,
                image_path=image_path,
                label_paths=label_paths,
                metadata=metadata,
                entities=entities,
                extension=ext,
            )
        )

    if not records:
        detail = "; first skipped: " + ", ".join(skipped[:10]) if skipped else ""
        raise BidsIndexError(f"no BIDS images found under {root}{detail}")
    return records


def _bucket_sizes(n: int, fractions) -> tuple:
    n_train = int(n * fractions[0])
    n_val = int(n * fractions[1])
    n_test = int(n * fractions[2])
    n_train += n - (n_train + n_val + n_test)  # leftovers go to train
    return n_train, n_val, n_test


def split_dataset(records, fractions, seed: int, split_key: str | None = None) -> DatasetSplit:
    """Partition subjects into train/validation/test.

    Splitting is subject-level (every session/contrast of a subject lands in
    one bucket). With ``split_key``, each distinct metadata value is split
    independently and the buckets merged.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise BidsIndexError(f"fractions must be three non-negative values, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise BidsIndexError(f"fractions must sum to 1, got {sum(fractions)}")

    subject_value = {}
    for rec in sorted(records, key=lambda r: str(r.image_path)):
        subject_value.setdefault(rec.subject_id, rec.metadata.get(split_key) if split_key else None)
    subjects = sorted(subject_value)
    n_buckets = sum(1 for f in fractions if f > 0)
    if len(subjects) < n_buckets:
        raise BidsIndexError(
            f"{len(subjects)} subjects cannot fill {n_buckets} non-empty split buckets"
        )

    if split_key is None:
        strata = {None: subjects}
    else:
        strata = {}
        for sub in subjects:
            strata.setdefault(str(subject_value[sub]), []).append(sub)

    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for value in sorted(strata, key=str):
        group = list(strata[value])
        order = rng.permutation(len(group))
        group = [group[i] for i in order]
        n_train, n_val, _ = _bucket_sizes(len(group), fractions)
        train.extend(group[:n_train])
        val.extend(group[n_train : n_train + n_val])
        test.extend(group[n_train + n_val :])
    return DatasetSplit(
        train=sorted(train), validation=sorted(val), test=sorted(test),
        seed=seed, split_key=split_key,
    )


_COMPARATORS = {
    ">=": lambda a, b: a >= b,
    "<=": lambda a, b: a <= b,
    "!=": lambda a, b: a != b,
    "==": lambda a, b: a == b,
    ">": lambda a, b: a > b,
    "<": lambda a, b: a < b,
}


def _value_matches(actual, allowed) -> bool:
    if isinstance(allowed, str):
        for op in _COMPARATORS:  # longest operators first by dict order
            if allowed.startswith(op):
                try:
                    return _COMPARATORS[op](float(actual), float(allowed[len(op):]))
                except (TypeError, ValueError):
                    return False
    return actual == allowed


def filter_records(records, predicate_spec: dict) -> list:
    """Keep records whose metadata satisfies every key of ``predicate_spec``.

    Each key maps to a list of allowed values; strings beginning with a
    comparison operator (e.g. ``">=18"``) are numeric range tests. A missing
    metadata key never matches.
    """
    kept = []
    for rec in records:
        ok = True
        for key, allowed in predicate_spec.items():
            if key not in rec.metadata:
                ok = False
                break
            values = allowed if isinstance(allowed, (list, tuple)) else [allowed]
            if not any(_value_matches(rec.metadata[key], v) for v in values):
                ok = False
                break
        if ok:
            kept.append(rec)
    if predicate_spec and not kept:
        logger.warning("filter %s matched no records", predicate_spec)
    return kept


def balance_weights(records, key: str) -> dict:
    """Inverse-frequency sampling weight per record, keyed on metadata ``key``."""
    missing = [rec.subject_id for rec in records if key not in rec.metadata]
    if missing:
        raise BidsIndexError(f"records missing balance key {key!r}: {sorted(set(missing))}")
    counts = {}
    for rec in records:
        value = rec.metadata[key]
        counts[value] = counts.get(value, 0) + 1
    return {rec: 1.0 / counts[rec.metadata[key]] for rec in records}
