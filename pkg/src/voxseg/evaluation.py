"""Inference with reconstruction, uncertainty estimation, metrics, reports.

Predictions always come back in the native geometry of the input volume:
preprocessing (resampling, cropping) is applied on the way in and its
geometric records are inverted on the way out. Uncertainty is estimated
either by stochastic forward passes (dropout left active at inference) or
by inverting random augmentations applied to the input.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage
from scipy.special import xlogy

from .bids import index_dataset, split_dataset
from .data import subjects_for_bucket
from .errors import VoxsegError
from .models import MetadataEncoder, cascade_predict, load_model
from .nifti import write_nifti
from .transforms import apply_pipeline, apply_volume_pipeline, derive_seed, invert_records
from .volume import Volume, extract_units, reconstruct_volume

logger = logging.getLogger(__name__)

_GEOMETRIC = ("resample", "crop_or_pad")


def _connectivity_structure(ndim: int) -> np.ndarray:
    """Full-neighborhood structure: 26-connectivity in 3D, 8 in 2D."""
    return np.ones((3,) * ndim, dtype=bool)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def _forward_units(model, units, config, metadata=None, encoder: MetadataEncoder = None):
    batch_size = config.training["batch_size"]
    meta_row = None
    if encoder is not None:
        meta_row = encoder.encode(metadata)
    preds = []
    with torch.no_grad():
        for start in range(0, len(units), batch_size):
            chunk = units[start:start + batch_size]
            x = torch.from_numpy(np.stack([u.data for u in chunk]))
            kwargs = {}
            if meta_row is not None:
                kwargs["metadata"] = torch.from_numpy(
                    np.tile(meta_row, (len(chunk), 1)).astype(np.float32)
                )
            if config.model["architecture"] == "hemis_unet":
                kwargs["availability"] = torch.ones(
                    (len(chunk), config.model["n_modalities"]), dtype=torch.bool
                )
            out = model(x, **kwargs)
            preds.extend(out[i].numpy() for i in range(out.shape[0]))
    return preds


def segment_volume(model, volume: Volume, config, metadata=None,
                   encoder: MetadataEncoder = None) -> Volume:
    """Soft prediction for one native-space volume.

    Applies the configured deterministic preprocessing, runs per-unit
    inference, reconstructs, and maps the result back to the input
    geometry. Module train/eval modes are left untouched so stochastic
    passes can keep dropout active.
    """
    prepped, _, records = apply_volume_pipeline(
        volume, None, config.transforms, training=False
    )
    loader = config.loader
    units = extract_units(
        prepped,
        mode=loader["mode"],
        slice_axis=loader["slice_axis"],
        patch_shape=loader["patch_shape"],
        stride=loader["stride"],
        volume_id="inference",
    )
    preds = _forward_units(model, units, config, metadata, encoder)
    recon = reconstruct_volume(units, preds)
    geometric = [r for r in records if r.name in _GEOMETRIC]
    if geometric:
        recon = invert_records(recon, geometric)
    if recon.shape != volume.shape:
        raise VoxsegError(
            f"reconstruction shape {recon.shape} != input {volume.shape}"
        )
    return Volume(
        data=np.clip(recon.data, 0.0, 1.0),
        spacing=volume.spacing,
        affine=volume.affine,
        orientation=volume.orientation,
    )


# ---------------------------------------------------------------------------
# uncertainty
# ---------------------------------------------------------------------------


@dataclass
class PredictionSet:
    """N aligned soft predictions of one volume plus their mean."""

    volume_id: str
    soft_maps: list
    mean_map: np.ndarray
    source: str
    spacing: tuple = (1.0, 1.0, 1.0)
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        shapes = {m.shape for m in self.soft_maps}
        if len(shapes) != 1:
            raise VoxsegError(f"soft maps disagree on shape: {sorted(shapes)}")
        for m in self.soft_maps:
            if m.min() < 0.0 or m.max() > 1.0:
                raise VoxsegError("soft map values must lie in [0, 1]")

    def as_volume(self, data: np.ndarray) -> Volume:
        return Volume(data=data.astype(np.float32), spacing=self.spacing,
                      affine=self.affine)


def _dropout_modules(model):
    return [m for m in model.modules()
            if isinstance(m, (torch.nn.Dropout, torch.nn.Dropout2d, torch.nn.Dropout3d))]


def sample_predictions(model, volume: Volume, mode: str, n_samples: int,
                       config, seed: int, metadata=None,
                       encoder: MetadataEncoder = None,
                       volume_id: str = "volume") -> PredictionSet:
    """Draw N stochastic soft predictions of one volume.

    epistemic: dropout stays active across N forward passes (seeded per
    pass). aleatoric: N random invertible augmentations of the input, each
    prediction mapped back through the inverse warp. Deterministic per seed.
    """
    if n_samples < 2:
        raise VoxsegError(f"need at least 2 samples, got {n_samples}")
    if mode == "epistemic":
        droppers = [m for m in _dropout_modules(model) if m.p > 0]
        if not droppers:
            raise VoxsegError("epistemic sampling needs a model with dropout > 0")
        model.eval()
        for m in droppers:
            m.train()
        try:
            maps = []
            for i in range(n_samples):
                torch.manual_seed(derive_seed(seed, "mc", i))
                maps.append(segment_volume(model, volume, config, metadata, encoder).data)
        finally:
            model.eval()
    elif mode == "aleatoric":
        aug_specs = [s for s in config.transforms if s["name"] == "affine_augment"]
        if not aug_specs:
            raise VoxsegError(
                "aleatoric sampling needs an invertible augmentation "
                "(affine_augment) in the transform list"
            )
        model.eval()
        base_unit = extract_units(volume, "volume", volume_id=volume_id)[0]
        maps = []
        for i in range(n_samples):
            augmented, recs = apply_pipeline(
                base_unit, aug_specs, derive_seed(seed, "aug", i)
            )
            aug_vol = Volume(data=augmented.data, spacing=volume.spacing,
                             affine=volume.affine, orientation=volume.orientation)
            soft = segment_volume(model, aug_vol, config, metadata, encoder)
            undone = invert_records(augmented.replace(data=soft.data, label=None), recs)
            maps.append(np.clip(undone.data, 0.0, 1.0))
    else:
        raise VoxsegError(f"unknown sampling mode {mode!r}")

    stack = np.stack(maps)
    return PredictionSet(
        volume_id=volume_id,
        soft_maps=[m for m in stack],
        mean_map=stack.mean(axis=0),
        source=mode,
        spacing=volume.spacing,
        affine=volume.affine,
    )


def voxel_uncertainty(pset: PredictionSet, measure: str) -> Volume:
    """Per-voxel uncertainty across the set's samples.

    entropy: binary entropy of the foreground vote fraction (each sample
    binarized at 0.5), exactly 0 where all samples agree. variance:
    population variance of the soft values. cv: std / (mean + 1e-8).
    """
    stack = np.stack(pset.soft_maps).astype(np.float64)
    if measure == "variance":
        out = stack.var(axis=0)
    elif measure == "cv":
        out = stack.std(axis=0) / (stack.mean(axis=0) + 1e-8)
    elif measure == "entropy":
        votes = (stack >= 0.5).mean(axis=0)
        out = -(xlogy(votes, votes) + xlogy(1.0 - votes, 1.0 - votes))
    else:
        raise VoxsegError(f"unknown uncertainty measure {measure!r}")
    return pset.as_volume(out)


def object_uncertainty(pset: PredictionSet, binary_prediction: Volume,
                       measure: str = "entropy") -> list:
    """Mean voxel uncertainty over each connected component.

    Returns one row per (class channel, component): class_index, object_id,
    volume_mm3, score. Empty predictions give an empty list.
    """
    unc = voxel_uncertainty(pset, measure).data
    voxel_mm3 = float(np.prod(binary_prediction.spacing))
    rows = []
    for c in range(binary_prediction.channels):
        mask = binary_prediction.data[c] > 0
        labeled, count = ndimage.label(mask, structure=_connectivity_structure(mask.ndim))
        for oid in range(1, count + 1):
            support = labeled == oid
            rows.append({
                "class_index": c,
                "object_id": oid,
                "volume_mm3": float(support.sum()) * voxel_mm3,
                "score": float(unc[c][support].mean()),
            })
    return rows


# ---------------------------------------------------------------------------
# post-processing
# ---------------------------------------------------------------------------


def _fill_holes(mask: np.ndarray) -> np.ndarray:
    return ndimage.binary_fill_holes(mask)


def _remove_small(mask: np.ndarray, min_mm3: float, voxel_mm3: float) -> np.ndarray:
    labeled, count = ndimage.label(mask, structure=_connectivity_structure(mask.ndim))
    if count == 0:
        return mask
    sizes = ndimage.sum_labels(mask, labeled, index=np.arange(1, count + 1))
    keep = np.flatnonzero(sizes * voxel_mm3 >= min_mm3) + 1
    return np.isin(labeled, keep)


def _keep_largest(mask: np.ndarray) -> np.ndarray:
    labeled, count = ndimage.label(mask, structure=_connectivity_structure(mask.ndim))
    if count == 0:
        return mask
    sizes = ndimage.sum_labels(mask, labeled, index=np.arange(1, count + 1))
    return labeled == (int(np.argmax(sizes)) + 1)


def postprocess(prediction: Volume, steps, uncertainty: Volume = None) -> Volume:
    """Apply ordered post-processing steps, returning a binary volume.

    Steps: threshold(t), fill_holes, remove_small(min_mm3), keep_largest,
    uncertainty_threshold(u_max). Components use full-neighborhood
    connectivity (26 in 3D, 8 in 2D). An input without a threshold step is
    binarized at 0.5 first.
    """
    data = prediction.data
    voxel_mm3 = float(np.prod(prediction.spacing))
    binary = None
    for spec in steps:
        spec = dict(spec)
        name = spec.pop("name")
        params = spec.pop("params", {})
        if spec:
            raise VoxsegError(f"postprocess step has unknown keys {sorted(spec)}")
        if name == "threshold":
            t = params.get("t", 0.5)
            if not 0.0 < t <= 1.0:
                raise VoxsegError(f"threshold must be in (0, 1], got {t}")
            binary = data >= t
            continue
        if binary is None:
            binary = data >= 0.5
        if name == "fill_holes":
            binary = np.stack([_fill_holes(binary[c]) for c in range(binary.shape[0])])
        elif name == "remove_small":
            min_mm3 = params["min_mm3"]
            binary = np.stack([
                _remove_small(binary[c], min_mm3, voxel_mm3)
                for c in range(binary.shape[0])
            ])
        elif name == "keep_largest":
            binary = np.stack([_keep_largest(binary[c]) for c in range(binary.shape[0])])
        elif name == "uncertainty_threshold":
            if uncertainty is None:
                raise VoxsegError("uncertainty_threshold needs an uncertainty map")
            u_max = params["u_max"]
            binary = binary & ~(uncertainty.data > u_max)
        else:
            raise VoxsegError(f"unknown postprocess step {name!r}")
    if binary is None:
        binary = data >= 0.5
    return prediction.with_data(binary.astype(np.float32))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class EvalRow:
    """One line of the evaluation report."""

    subject_id: str = ""
    class_index: int = 0
    size_bin: str = "all"
    dice: float = math.nan
    precision: float = math.nan
    recall: float = math.nan
    specificity: float = math.nan
    hausdorff_mm: float = math.nan
    abs_volume_diff_mm3: float = math.nan
    rel_volume_error: float = math.nan
    lesion_tp: int = 0
    lesion_fp: int = 0
    lesion_fn: int = 0

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


LESION_OVERLAP_MIN = 0.25


def _hausdorff_mm(pred: np.ndarray, gt: np.ndarray, spacing) -> float:
    p_any, g_any = bool(pred.any()), bool(gt.any())
    if not p_any and not g_any:
        return 0.0
    if p_any != g_any:
        return math.nan
    dist_to_gt = ndimage.distance_transform_edt(~gt, sampling=spacing)
    dist_to_pred = ndimage.distance_transform_edt(~pred, sampling=spacing)
    return float(max(dist_to_gt[pred].max(), dist_to_pred[gt].max()))


def _lesion_counts(pred: np.ndarray, gt: np.ndarray) -> tuple:
    structure = _connectivity_structure(gt.ndim)
    gt_labeled, gt_count = ndimage.label(gt, structure=structure)
    tp = fn = 0
    for oid in range(1, gt_count + 1):
        component = gt_labeled == oid
        overlap = np.logical_and(component, pred).sum() / component.sum()
        if overlap >= LESION_OVERLAP_MIN:
            tp += 1
        else:
            fn += 1
    pred_labeled, pred_count = ndimage.label(pred, structure=structure)
    fp = sum(
        1 for oid in range(1, pred_count + 1)
        if not np.logical_and(pred_labeled == oid, gt).any()
    )
    return tp, fp, fn


def compute_metrics(pred: np.ndarray, gt: np.ndarray, spacing) -> EvalRow:
    """Voxel- and object-level metrics of one binary (prediction, truth) pair.

    Conventions: dice(empty, empty) = 1; undefined ratios are NaN;
    hausdorff of exactly one empty mask is NaN; a truth component counts as
    detected when at least 25% of it overlaps the prediction.
    """
    pred = np.asarray(pred) > 0
    gt = np.asarray(gt) > 0
    if pred.shape != gt.shape:
        raise VoxsegError(f"prediction shape {pred.shape} != truth shape {gt.shape}")

    tp = float(np.logical_and(pred, gt).sum())
    fp = float(np.logical_and(pred, ~gt).sum())
    fn = float(np.logical_and(~pred, gt).sum())
    tn = float(np.logical_and(~pred, ~gt).sum())

    dice = 1.0 if (tp + fp + fn) == 0 else 2.0 * tp / (2.0 * tp + fp + fn)
    precision = tp / (tp + fp) if (tp + fp) > 0 else math.nan
    recall = tp / (tp + fn) if (tp + fn) > 0 else math.nan
    specificity = tn / (tn + fp) if (tn + fp) > 0 else math.nan

    voxel_mm3 = float(np.prod(spacing))
    vol_pred = pred.sum() * voxel_mm3
    vol_gt = gt.sum() * voxel_mm3
    rel = (vol_pred - vol_gt) / vol_gt if vol_gt > 0 else math.nan

    lesion_tp, lesion_fp, lesion_fn = _lesion_counts(pred, gt)
    return EvalRow(
        dice=dice,
        precision=precision,
        recall=recall,
        specificity=specificity,
        hausdorff_mm=_hausdorff_mm(pred, gt, spacing),
        abs_volume_diff_mm3=abs(vol_pred - vol_gt),
        rel_volume_error=rel,
        lesion_tp=lesion_tp,
        lesion_fp=lesion_fp,
        lesion_fn=lesion_fn,
    )


def size_binned_metrics(pred: np.ndarray, gt: np.ndarray, spacing,
                        bins_mm3) -> list:
    """Metrics per truth-component size bin.

    Consecutive edges define half-open bins [lo, hi). Voxel metrics are
    restricted to the union of each bin's truth components; false-positive
    components (no truth overlap anywhere) are binned by their own volume.
    """
    if list(bins_mm3) != sorted(bins_mm3) or len(bins_mm3) < 2:
        raise VoxsegError("bins_mm3 must be ascending with at least two edges")
    pred = np.asarray(pred) > 0
    gt = np.asarray(gt) > 0
    voxel_mm3 = float(np.prod(spacing))
    structure = _connectivity_structure(gt.ndim)

    gt_labeled, gt_count = ndimage.label(gt, structure=structure)
    gt_volumes = {
        oid: float((gt_labeled == oid).sum()) * voxel_mm3
        for oid in range(1, gt_count + 1)
    }
    pred_labeled, pred_count = ndimage.label(pred, structure=structure)
    fp_volumes = [
        float((pred_labeled == oid).sum()) * voxel_mm3
        for oid in range(1, pred_count + 1)
        if not np.logical_and(pred_labeled == oid, gt).any()
    ]

    rows = []
    for lo, hi in zip(bins_mm3[:-1], bins_mm3[1:]):
        in_bin = [oid for oid, v in gt_volumes.items() if lo <= v < hi]
        mask = np.isin(gt_labeled, in_bin)
        row = compute_metrics(pred & mask, gt & mask, spacing)
        row.size_bin = f"[{lo:g},{hi:g})"
        row.lesion_fp = sum(1 for v in fp_volumes if lo <= v < hi)
        rows.append(row)
    return rows


def optimal_threshold(soft_preds, gts, step: float, criterion: str) -> float:
    """Grid search of the binarization threshold over a prediction set.

    metric_max maximizes mean Dice; roc maximizes Youden's J (TPR - FPR,
    pooled voxel counts). Candidates are {step, 2*step, ..., <= 1-step};
    ties resolve to the smallest threshold.
    """
    if not soft_preds or len(soft_preds) != len(gts):
        raise VoxsegError("need equally many soft predictions and truths")
    if not 0.0 < step < 1.0:
        raise VoxsegError(f"step must be in (0, 1), got {step}")
    if criterion not in ("metric_max", "roc"):
        raise VoxsegError(f"unknown criterion {criterion!r}")

    pairs = [(np.asarray(p, dtype=np.float64), np.asarray(g) > 0)
             for p, g in zip(soft_preds, gts)]
    candidates = []
    k = 1
    while k * step <= 1.0 - step + 1e-12:
        candidates.append(round(k * step, 12))
        k += 1

    best_t, best_score = None, -math.inf
    for t in candidates:
        if criterion == "metric_max":
            dices = []
            for soft, gt in pairs:
                binary = soft >= t
                denom = binary.sum() + gt.sum()
                dices.append(
                    1.0 if denom == 0
                    else 2.0 * np.logical_and(binary, gt).sum() / denom
                )
            score = float(np.mean(dices))
        else:
            tp = fp = fn = tn = 0
            for soft, gt in pairs:
                binary = soft >= t
                tp += np.logical_and(binary, gt).sum()
                fp += np.logical_and(binary, ~gt).sum()
                fn += np.logical_and(~binary, gt).sum()
                tn += np.logical_and(~binary, ~gt).sum()
            tpr = tp / (tp + fn) if (tp + fn) > 0 else 0.0
            fpr = fp / (fp + tn) if (fp + tn) > 0 else 0.0
            score = float(tpr - fpr)
        if score > best_score:
            best_t, best_score = t, score
    return best_t


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

REPORT_COLUMNS = tuple(f.name for f in fields(EvalRow))


def _format_cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def write_report(rows, path):
    """Write evaluation rows as CSV, sorted by (subject, class, bin),
    numbers at 6 significant digits."""
    ordered = sorted(rows, key=lambda r: (r.subject_id, r.class_index, r.size_bin))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for row in ordered:
            d = row.as_dict()
            writer.writerow([_format_cell(d[c]) for c in REPORT_COLUMNS])
    return path


# ---------------------------------------------------------------------------
# test-set orchestration
# ---------------------------------------------------------------------------


def _cascade_volume(model, detector, volume: Volume, config) -> Volume:
    """Detector-cropped inference following the same preprocess/invert path
    as :func:`segment_volume`."""
    prepped, _, records = apply_volume_pipeline(
        volume, None, config.transforms, training=False
    )
    soft = cascade_predict(prepped, detector, model,
                           config.cascade["margin_voxels"])
    geometric = [r for r in records if r.name in _GEOMETRIC]
    recon = invert_records(soft, geometric) if geometric else soft
    return Volume(
        data=np.clip(recon.data, 0.0, 1.0),
        spacing=volume.spacing,
        affine=volume.affine,
        orientation=volume.orientation,
    )


def run_test(config, model_dir, records=None):
    """Evaluate a serialized model on the held-out test bucket.

    Writes `<out>/results_eval.csv`, per-subject `<id>_pred.nii.gz`, and
    `<id>_unc-<measure>.nii.gz` when uncertainty is configured. Returns
    (mean dice over whole-volume rows, all report rows).
    """
    out_dir = Path(config.output["path"])
    out_dir.mkdir(parents=True, exist_ok=True)
    model, encoder = load_model(model_dir)
    model.eval()

    if records is None:
        loader = config.loader
        if not loader["bids_path"]:
            raise VoxsegError("loader.bids_path is required for testing")
        contrasts = sorted(set(loader["contrasts"]["train"]) | set(loader["contrasts"]["test"]))
        records = index_dataset(loader["bids_path"], contrasts, loader["target_suffix"])
    split = split_dataset(records, config.split["fractions"], config.split["seed"],
                          config.split["split_key"])
    subjects = subjects_for_bucket(records, set(split.test), config,
                                   training=False, preprocess=False)
    if not subjects:
        raise VoxsegError("test bucket contains no usable subjects")

    detector = None
    if config.cascade["detector_path"]:
        detector, _ = load_model(config.cascade["detector_path"])
        detector.eval()

    meta_key = config.model["film_metadata_key"]
    unc_cfg = config.uncertainty
    evaluated = []
    for subject in subjects:
        meta_value = subject.metadata.get(meta_key) if encoder else None
        unc_maps = {}
        if unc_cfg["mode"]:
            pset = sample_predictions(
                model, subject.image, unc_cfg["mode"], unc_cfg["n_samples"],
                config, seed=config.split["seed"], metadata=meta_value,
                encoder=encoder, volume_id=subject.volume_id,
            )
            soft = Volume(data=pset.mean_map.astype(np.float32),
                          spacing=subject.image.spacing,
                          affine=subject.image.affine,
                          orientation=subject.image.orientation)
            for measure in unc_cfg["measures"]:
                unc_maps[measure] = voxel_uncertainty(pset, measure)
                write_nifti(unc_maps[measure],
                            out_dir / f"{subject.volume_id}_unc-{measure}.nii.gz")
        elif detector is not None:
            soft = _cascade_volume(model, detector, subject.image, config)
        else:
            soft = segment_volume(model, subject.image, config, meta_value, encoder)
        evaluated.append((subject, soft, unc_maps))

    ev = config.evaluation
    if ev["threshold"] == "search":
        threshold = optimal_threshold(
            [soft.data for _, soft, _ in evaluated],
            [subject.label.data for subject, _, _ in evaluated],
            ev["search_step"], ev["criterion"],
        )
        logger.info("threshold search selected t=%g", threshold)
    else:
        threshold = float(ev["threshold"])

    steps = [{"name": "threshold", "params": {"t": threshold}}] + ev["postprocess"]
    rows = []
    for subject, soft, unc_maps in evaluated:
        unc_for_steps = next(iter(unc_maps.values()), None)
        binary = postprocess(soft, steps, uncertainty=unc_for_steps)
        write_nifti(binary, out_dir / f"{subject.volume_id}_pred.nii.gz")
        label = subject.label
        if binary.channels != label.channels:
            raise VoxsegError(
                f"{subject.volume_id}: prediction has {binary.channels} classes "
                f"but label has {label.channels}"
            )
        for c in range(binary.channels):
            row = compute_metrics(binary.data[c], label.data[c], subject.image.spacing)
            row.subject_id = subject.volume_id
            row.class_index = c
            rows.append(row)
            if ev["bins_mm3"]:
                for binned in size_binned_metrics(binary.data[c], label.data[c],
                                                  subject.image.spacing, ev["bins_mm3"]):
                    binned.subject_id = subject.volume_id
                    binned.class_index = c
                    rows.append(binned)

    write_report(rows, out_dir / "results_eval.csv")
    mean_dice = float(np.nanmean([r.dice for r in rows if r.size_bin == "all"]))
    return mean_dice, rows
