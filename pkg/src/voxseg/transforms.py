"""Preprocessing and augmentation with recorded, invertible parameters.

Volume-level operations (resample, crop_or_pad, normalize_zscore,
intensity_adjust, dilate_ground_truth) run once per volume; unit-level
augmentations (affine_augment, elastic_augment) run per sample with a seed
derived from (global seed, volume id, unit index) so loader parallelism
cannot change outcomes. Every operation returns a :class:`TransformRecord`
holding the parameters actually applied; geometric records can be inverted
in reverse order to map predictions back to the source space.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import VoxsegError
from .volume import SampleUnit, Volume

_HIST_BINS = 256


@dataclass
class TransformRecord:
    """Parameters actually applied by one transform instance."""

    name: str
    params: dict = field(default_factory=dict)
    scope: str = "both"  # image | label | both
    invertible: bool = False


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from heterogeneous parts (process-independent)."""
    text = "|".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def _is_binary(arr: np.ndarray) -> bool:
    return bool(np.isin(arr, (0.0, 1.0)).all())


# ---------------------------------------------------------------------------
# volume-level operations
# ---------------------------------------------------------------------------


def resample(volume: Volume, target_spacing, order: int = 1) -> Volume:
    """Resample to ``target_spacing`` (mm); output dims round(dim*sp/target).

    order 0 = nearest (labels), 1 = trilinear, 2 = quadratic spline.
    """
    target_spacing = tuple(float(s) for s in target_spacing)
    if any(s <= 0 or not np.isfinite(s) for s in target_spacing):
        raise VoxsegError(f"target spacing must be positive, got {target_spacing}")
    if order not in (0, 1, 2):
        raise VoxsegError(f"resample order must be 0, 1, or 2, got {order}")
    zoom = tuple(s / t for s, t in zip(volume.spacing, target_spacing))
    out = np.stack(
        [ndimage.zoom(ch, zoom, order=order, mode="nearest") for ch in volume.data]
    )
    affine = volume.affine.copy()
    for j in range(3):
        affine[:3, j] *= target_spacing[j] / volume.spacing[j]
    return Volume(data=out, spacing=target_spacing, affine=affine,
                  orientation=volume.orientation)


def _crop_window(shape, target_shape, center):
    if center == "auto" or center is None:
        center = tuple(d // 2 for d in shape)
    starts = [int(c) - t // 2 for c, t in zip(center, target_shape)]
    return starts


def crop_or_pad(volume: Volume, target_shape, center="auto"):
    """Crop symmetrically about ``center``, zero-padding past the bounds.

    Returns the new volume and a record whose offsets make the operation
    exactly invertible (original voxels restored, zeros elsewhere).
    """
    target_shape = tuple(int(t) for t in target_shape)
    if any(t <= 0 for t in target_shape):
        raise VoxsegError(f"target shape must be positive, got {target_shape}")
    starts = _crop_window(volume.shape, target_shape, center)

    out = np.zeros((volume.channels,) + target_shape, dtype=np.float32)
    src, dst = [slice(None)], [slice(None)]
    for start, tdim, dim in zip(starts, target_shape, volume.shape):
        lo, hi = max(start, 0), min(start + tdim, dim)
        if hi <= lo:
            raise VoxsegError("crop window entirely outside volume")
        src.append(slice(lo, hi))
        dst.append(slice(lo - start, hi - start))
    out[tuple(dst)] = volume.data[tuple(src)]

    affine = volume.affine.copy()
    affine[:3, 3] = volume.voxel_to_world(starts)
    record = TransformRecord(
        name="crop_or_pad",
        params={
            "starts": tuple(starts),
            "target_shape": target_shape,
            "original_shape": tuple(volume.shape),
            "original_affine": volume.affine.tolist(),
        },
        scope="both",
        invertible=True,
    )
    cropped = Volume(data=out, spacing=volume.spacing, affine=affine,
                     orientation=volume.orientation)
    return cropped, record


def normalize_zscore(volume: Volume, nonbackground: bool = False) -> Volume:
    """Standardize each channel to mean 0, std 1.

    With ``nonbackground``, statistics come from voxels != 0 but the whole
    channel is rescaled. Constant input is an error.
    """
    out = np.empty_like(volume.data)
    for c, ch in enumerate(volume.data):
        sel = ch[ch != 0] if nonbackground else ch
        if sel.size == 0:
            raise VoxsegError(f"channel {c} has no nonbackground voxels")
        mean = float(sel.mean())
        std = float(sel.std())
        if std < 1e-12:
            raise VoxsegError(f"channel {c} is constant, z-score undefined")
        out[c] = (ch - mean) / std
    return volume.with_data(out)


def intensity_adjust(volume: Volume, clip_percentiles=(0.0, 100.0),
                     equalize: bool = False) -> Volume:
    """Clamp to percentile values, then optionally equalize the histogram.

    Equalization maps intensities through the empirical CDF (256 bins) onto
    [0, 1].
    """
    lo, hi = (float(p) for p in clip_percentiles)
    if not (0.0 <= lo < hi <= 100.0):
        raise VoxsegError(f"percentiles must satisfy 0 <= lo < hi <= 100, got {(lo, hi)}")
    data = volume.data
    lo_v, hi_v = np.percentile(data, [lo, hi])
    data = np.clip(data, lo_v, hi_v)
    if equalize:
        hist, edges = np.histogram(data, bins=_HIST_BINS)
        cdf = np.cumsum(hist).astype(np.float64)
        cdf /= cdf[-1]
        data = np.interp(data, edges[1:], cdf).astype(np.float32)
    return volume.with_data(data.astype(np.float32))


def dilate_ground_truth(label: Volume, dilation_mm: float) -> Volume:
    """Soften a binary label: 1 on the object, linear decay to 0 at
    ``dilation_mm`` Euclidean distance from it."""
    if dilation_mm < 0:
        raise VoxsegError(f"dilation must be non-negative, got {dilation_mm}")
    if not _is_binary(label.data):
        raise VoxsegError("dilate_ground_truth requires a binary label")
    if dilation_mm == 0:
        return label
    out = np.empty_like(label.data)
    for c, ch in enumerate(label.data):
        fg = ch > 0
        dist = ndimage.distance_transform_edt(~fg, sampling=label.spacing)
        out[c] = np.maximum(0.0, 1.0 - dist / dilation_mm).astype(np.float32)
        out[c][fg] = 1.0
    return label.with_data(out)


# ---------------------------------------------------------------------------
# unit-level augmentations
# ---------------------------------------------------------------------------


def _as_range(value, symmetric_around=0.0):
    if np.isscalar(value):
        delta = abs(float(value))
        return (symmetric_around - delta, symmetric_around + delta)
    lo, hi = (float(v) for v in value)
    if hi < lo:
        raise VoxsegError(f"range must be (lo, hi), got {(lo, hi)}")
    return lo, hi


def _rotation_matrix(ndim: int, angle_deg: float) -> np.ndarray:
    """Rotation in the first-two-axes plane (the only plane for 2D units)."""
    theta = np.deg2rad(angle_deg)
    rot = np.eye(ndim)
    rot[0, 0] = np.cos(theta)
    rot[0, 1] = -np.sin(theta)
    rot[1, 0] = np.sin(theta)
    rot[1, 1] = np.cos(theta)
    return rot


def _warp_affine(arr: np.ndarray, matrix: np.ndarray, offset: np.ndarray,
                 is_label: bool) -> np.ndarray:
    out = np.stack(
        [
            ndimage.affine_transform(ch, matrix, offset=offset, order=1, mode="constant")
            for ch in arr
        ]
    )
    if is_label and _is_binary(arr):
        out = (out >= 0.5).astype(np.float32)
    return out.astype(np.float32)


def _affine_matrices(spatial_shape, rotation_deg, scale, translation):
    """scipy (matrix, offset) pairs for forward and inverse application."""
    ndim = len(spatial_shape)
    center = (np.asarray(spatial_shape, dtype=float) - 1.0) / 2.0
    translation = np.asarray(translation, dtype=float)
    content = _rotation_matrix(ndim, rotation_deg) * scale
    fwd = np.linalg.inv(content)
    fwd_offset = center - fwd @ (center + translation)
    inv_offset = center + translation - content @ center
    return (fwd, fwd_offset), (content, inv_offset)


def affine_augment(sample: SampleUnit, rotation_deg_range=0.0, scale_range=(1.0, 1.0),
                   translation_vox_range=0.0, rng_seed: int = 0):
    """Random rotation (first-two-axes plane), isotropic scale, and
    per-axis translation, linearly interpolated; binary labels are
    re-thresholded at 0.5. Exactly parameterized, hence invertible."""
    rng = np.random.default_rng(rng_seed)
    rot_lo, rot_hi = _as_range(rotation_deg_range)
    sc_lo, sc_hi = _as_range(scale_range, symmetric_around=1.0) \
        if np.isscalar(scale_range) else _as_range(scale_range)
    tr_lo, tr_hi = _as_range(translation_vox_range)

    ndim = sample.data.ndim - 1
    rotation_deg = float(rng.uniform(rot_lo, rot_hi))
    scale = float(rng.uniform(sc_lo, sc_hi))
    translation = tuple(float(t) for t in rng.uniform(tr_lo, tr_hi, size=ndim))

    (fwd, fwd_off), _ = _affine_matrices(sample.data.shape[1:], rotation_deg, scale, translation)
    data = _warp_affine(sample.data, fwd, fwd_off, is_label=False)
    label = sample.label
    if label is not None:
        label = _warp_affine(label, fwd, fwd_off, is_label=True)
    record = TransformRecord(
        name="affine_augment",
        params={
            "rotation_deg": rotation_deg,
            "scale": scale,
            "translation_vox": translation,
            "spatial_shape": tuple(sample.data.shape[1:]),
        },
        scope="both",
        invertible=True,
    )
    return sample.replace(data=data, label=label), record


def elastic_augment(sample: SampleUnit, alpha: float = 0.0, sigma: float = 4.0,
                    rng_seed: int = 0):
    """Dense random displacement: white noise smoothed by a Gaussian of
    ``sigma`` mm, rescaled so its RMS amplitude is ``alpha`` voxels. The same
    field warps image and label. Not invertible."""
    if alpha < 0:
        raise VoxsegError(f"alpha must be non-negative, got {alpha}")
    if sigma <= 0:
        raise VoxsegError(f"sigma must be positive, got {sigma}")
    ndim = sample.data.ndim - 1
    axes = [a for a in range(3) if a != sample.slice_axis][:2] if ndim == 2 else [0, 1, 2]
    sigma_vox = [sigma / sample.spacing[a] for a in axes]
    shape = sample.data.shape[1:]

    rng = np.random.default_rng(rng_seed)
    fields = []
    for _ in range(ndim):
        noise = ndimage.gaussian_filter(rng.standard_normal(shape), sigma_vox)
        rms = float(np.sqrt(np.mean(noise**2)))
        fields.append(noise * (alpha / rms) if alpha > 0 and rms > 0 else np.zeros(shape))

    grid = np.meshgrid(*[np.arange(d, dtype=float) for d in shape], indexing="ij")
    coords = [g + f for g, f in zip(grid, fields)]

    def warp(arr, is_label):
        out = np.stack(
            [ndimage.map_coordinates(ch, coords, order=1, mode="constant") for ch in arr]
        )
        if is_label and _is_binary(arr):
            out = (out >= 0.5).astype(np.float32)
        return out.astype(np.float32)

    data = warp(sample.data, False)
    label = None if sample.label is None else warp(sample.label, True)
    record = TransformRecord(
        name="elastic_augment",
        params={"alpha": float(alpha), "sigma": float(sigma), "rng_seed": int(rng_seed)},
        scope="both",
        invertible=False,
    )
    return sample.replace(data=data, label=label), record


_UNIT_TRANSFORMS = {
    "affine_augment": affine_augment,
    "elastic_augment": elastic_augment,
}


def apply_pipeline(sample: SampleUnit, specs, rng_seed: int):
    """Apply unit-level transform specs in order.

    The seed for each transform is derived from (rng_seed, volume id, unit
    index, position in the pipeline), so outcomes are independent of loader
    worker scheduling.
    """
    records = []
    base = derive_seed(rng_seed, sample.volume_id, sample.index_or_origin)
    for pos, spec in enumerate(specs):
        spec = dict(spec)
        name = spec.pop("name")
        spec.update(spec.pop("params", {}))
        if name not in _UNIT_TRANSFORMS:
            raise VoxsegError(f"unknown unit transform {name!r}")
        seed = derive_seed(base, pos, name)
        sample, record = _UNIT_TRANSFORMS[name](sample, rng_seed=seed, **spec)
        records.append(record)
    return sample, records


# ---------------------------------------------------------------------------
# inversion
# ---------------------------------------------------------------------------


def _invert_crop(data: np.ndarray, params: dict) -> np.ndarray:
    original = tuple(params["original_shape"])
    starts = params["starts"]
    target = params["target_shape"]
    out = np.zeros((data.shape[0],) + original, dtype=data.dtype)
    src, dst = [slice(None)], [slice(None)]
    for start, tdim, dim in zip(starts, target, original):
        lo, hi = max(start, 0), min(start + tdim, dim)
        dst.append(slice(lo, hi))
        src.append(slice(lo - start, hi - start))
    out[tuple(dst)] = data[tuple(src)]
    return out


def _invert_resample(data: np.ndarray, params: dict) -> np.ndarray:
    original = tuple(params["original_shape"])
    zoom = tuple(o / c for o, c in zip(original, data.shape[1:]))
    out = np.stack([ndimage.zoom(ch, zoom, order=1, mode="nearest") for ch in data])
    if out.shape[1:] != original:
        raise VoxsegError(
            f"inverse resample produced {out.shape[1:]}, expected {original}"
        )
    return out.astype(np.float32)


def _invert_affine(data: np.ndarray, params: dict) -> np.ndarray:
    _, (inv, inv_off) = _affine_matrices(
        params["spatial_shape"], params["rotation_deg"], params["scale"],
        params["translation_vox"],
    )
    return _warp_affine(data, inv, inv_off, is_label=False)


_INVERTERS = {
    "crop_or_pad": _invert_crop,
    "resample": _invert_resample,
    "affine_augment": _invert_affine,
}


def invert_records(sample, records):
    """Apply inverse transforms in reverse order.

    ``sample`` may be a :class:`SampleUnit` or :class:`Volume`; every record
    must be invertible.
    """
    data = sample.data
    geometry = None
    for record in reversed(records):
        if not record.invertible:
            raise VoxsegError(f"transform {record.name!r} is not invertible")
        if record.name not in _INVERTERS:
            raise VoxsegError(f"no inverse registered for {record.name!r}")
        data = _INVERTERS[record.name](data, record.params)
        if record.name in ("crop_or_pad", "resample"):
            geometry = record.params

    if isinstance(sample, Volume):
        if geometry is not None:
            return Volume(
                data=data,
                spacing=tuple(geometry.get("original_spacing", sample.spacing)),
                affine=np.asarray(geometry["original_affine"]),
                orientation=sample.orientation,
            )
        return sample.with_data(data)
    return sample.replace(data=data)


# resample needs original geometry on its record when used in a recorded
# pipeline; apply_volume_pipeline builds that record.


def apply_volume_pipeline(image: Volume, label: Volume | None, specs,
                          training: bool = True):
    """Run deterministic volume-level specs in order on image and label.

    ``dilate_ground_truth`` only applies when ``training`` is true (raw
    labels are kept for evaluation). Returns (image, label, records).
    """
    records = []
    for spec in specs:
        spec = dict(spec)
        name = spec.pop("name")
        spec.update(spec.pop("params", {}))
        if name == "resample":
            target = spec.get("target_spacing")
            record = TransformRecord(
                name="resample",
                params={
                    "original_shape": tuple(image.shape),
                    "original_spacing": tuple(image.spacing),
                    "original_affine": image.affine.tolist(),
                    "target_spacing": tuple(target),
                    "order": spec.get("order", 1),
                },
                scope="both",
                invertible=True,
            )
            image = resample(image, target, order=spec.get("order", 1))
            if label is not None:
                label_order = 0 if _is_binary(label.data) else 1
                label = resample(label, target, order=label_order)
            records.append(record)
        elif name == "crop_or_pad":
            image, record = crop_or_pad(image, **spec)
            if label is not None:
                label, _ = crop_or_pad(label, **spec)
            records.append(record)
        elif name == "normalize_zscore":
            image = normalize_zscore(image, **spec)
            records.append(TransformRecord("normalize_zscore", dict(spec), "image", False))
        elif name == "intensity_adjust":
            image = intensity_adjust(image, **spec)
            records.append(TransformRecord("intensity_adjust", dict(spec), "image", False))
        elif name == "dilate_ground_truth":
            if training and label is not None:
                label = dilate_ground_truth(label, **spec)
            records.append(TransformRecord("dilate_ground_truth", dict(spec), "label", False))
        elif name in _UNIT_TRANSFORMS:
            continue  # randomized unit-level transforms run at fetch time
        else:
            raise VoxsegError(f"unknown volume transform {name!r}")
    return image, label, records
