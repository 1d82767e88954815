"""Assemble BIDS records into preprocessed volumes and batched sample units.

One ``Subject`` groups the records of a (subject, session): its contrast
images stack as channels (when multichannel), its labels stack one channel
per target class. Volumes are preprocessed once; units are extracted per
the loader mode, and randomized augmentations run at fetch time with seeds
derived from (seed, volume id, unit index, epoch) so batch composition and
augmentation outcomes are pure functions of (seed, epoch).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .bids import SubjectRecord
from .errors import VoxsegError
from .nifti import read_nifti
from .transforms import apply_pipeline, apply_volume_pipeline, derive_seed
from .volume import Volume, extract_units

logger = logging.getLogger(__name__)

_UNIT_TRANSFORM_NAMES = ("affine_augment", "elastic_augment")


@dataclass
class Subject:
    """Preprocessed image/label volumes for one (subject, session) group."""

    volume_id: str
    subject_id: str
    image: Volume
    label: Volume | None
    metadata: dict
    preprocess_records: list = field(default_factory=list)


def _group_key(record: SubjectRecord) -> str:
    vid = f"sub-{record.subject_id}"
    if record.session_id:
        vid += f"_ses-{record.session_id}"
    return vid


def _stack_channels(volumes) -> Volume:
    ref = volumes[0]
    for v in volumes[1:]:
        if v.shape != ref.shape:
            raise VoxsegError(
                f"channel volumes disagree on shape: {v.shape} vs {ref.shape}"
            )
    data = np.concatenate([v.data for v in volumes], axis=0)
    return Volume(data=data, spacing=ref.spacing, affine=ref.affine,
                  orientation=ref.orientation)


def load_subject(records, config, training: bool, require_label: bool = True,
                 preprocess: bool = True):
    """Build one Subject from the records of a (subject, session) group.

    Contrast order follows the config; labels follow target_suffix order.
    Returns None when labels are required but absent. With
    ``preprocess=False`` the volumes stay in their native space (inference
    preprocesses internally so it can map predictions back).
    """
    loader = config.loader
    contrasts = loader["contrasts"]["train" if training else "test"]
    by_contrast = {r.contrast: r for r in records}
    wanted = contrasts if loader["multichannel"] else contrasts[:1]
    missing = [c for c in wanted if c not in by_contrast]
    if missing:
        logger.warning("%s lacks contrasts %s; skipped", _group_key(records[0]), missing)
        return None
    chosen = [by_contrast[c] for c in wanted]

    images = [read_nifti(r.image_path) for r in chosen]
    image = _stack_channels(images) if len(images) > 1 else images[0]

    primary = chosen[0]
    label = None
    if primary.label_paths:
        label_vols = [read_nifti(p) for p in primary.label_paths]
        for p, lv in zip(primary.label_paths, label_vols):
            if lv.shape != image.shape:
                raise VoxsegError(
                    f"label {p} dims {lv.shape} != image dims {image.shape}"
                )
        label = _stack_channels(label_vols) if len(label_vols) > 1 else label_vols[0]
    if label is None and require_label:
        logger.warning("%s has no label; skipped", _group_key(primary))
        return None

    records_applied = []
    if preprocess:
        image, label, records_applied = apply_volume_pipeline(
            image, label, config.transforms, training=training
        )
    return Subject(
        volume_id=_group_key(primary),
        subject_id=primary.subject_id,
        image=image,
        label=label,
        metadata=dict(primary.metadata),
        preprocess_records=records_applied,
    )


def subjects_for_bucket(records, subject_ids, config, training: bool,
                        require_label: bool = True, preprocess: bool = True):
    """Load every (subject, session) group whose subject is in the bucket."""
    groups = {}
    for rec in records:
        if rec.subject_id in subject_ids:
            groups.setdefault(_group_key(rec), []).append(rec)
    subjects = []
    for key in sorted(groups):
        subject = load_subject(groups[key], config, training, require_label,
                               preprocess)
        if subject is not None:
            subjects.append(subject)
    return subjects


def units_for_subject(subject: Subject, config) -> list:
    loader = config.loader
    return extract_units(
        subject.image,
        mode=loader["mode"],
        slice_axis=loader["slice_axis"],
        patch_shape=loader["patch_shape"],
        stride=loader["stride"],
        label=subject.label,
        volume_id=subject.volume_id,
        metadata=subject.metadata,
    )


class UnitDataset:
    """Sample units plus fetch-time augmentation; indexable and epoch-aware."""

    def __init__(self, subjects, config, augment: bool, seed: int):
        self.config = config
        self.augment_specs = [
            t for t in config.transforms if t["name"] in _UNIT_TRANSFORM_NAMES
        ] if augment else []
        self.seed = seed
        self.epoch = 0
        self.units = []
        for subject in subjects:
            self.units.extend(units_for_subject(subject, config))
        if not self.units:
            raise VoxsegError("no sample units produced; check loader configuration")

    def __len__(self) -> int:
        return len(self.units)

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def fetch(self, index: int):
        """Unit at ``index`` with this epoch's augmentation applied."""
        unit = self.units[index]
        if self.augment_specs:
            unit, _ = apply_pipeline(
                unit, self.augment_specs, derive_seed(self.seed, "aug", self.epoch)
            )
        return unit

    def batch_order(self, epoch: int, balance_weights=None) -> np.ndarray:
        """Index order for one epoch; a pure function of (seed, epoch).

        With balance weights, indices are drawn with replacement in
        proportion to the weights instead of permuted.
        """
        rng = np.random.default_rng(derive_seed(self.seed, "order", epoch))
        n = len(self.units)
        if balance_weights is None:
            return rng.permutation(n)
        w = np.asarray(balance_weights, dtype=float)
        return rng.choice(n, size=n, replace=True, p=w / w.sum())


def collate(units, metadata_encoder=None, metadata_key=None):
    """Stack units into (images, labels, metadata) torch batch tensors."""
    images = torch.from_numpy(np.stack([u.data for u in units]))
    labels = None
    if all(u.label is not None for u in units):
        labels = torch.from_numpy(np.stack([u.label for u in units]))
    meta = None
    if metadata_encoder is not None and metadata_key is not None:
        meta = torch.from_numpy(np.stack([
            metadata_encoder.encode(u.metadata.get(metadata_key)) for u in units
        ]))
    return images, labels, meta
