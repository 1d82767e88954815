"""Volumes, sample units, and the geometry between them.

A :class:`Volume` is a channel-first float32 array with voxel spacing and a
voxel-to-world affine. Volumes are split into :class:`SampleUnit` objects
(whole volume, slices, or patches) whose provenance fields are sufficient to
place predictions bit-exactly back into the source geometry.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import EmptyMaskError, VoxsegError

# letter pairs for world axes x, y, z: (negative direction, positive direction)
_AX_LETTERS = (("L", "R"), ("P", "A"), ("I", "S"))
_LETTER_AXIS = {"R": (0, 1), "L": (0, -1), "A": (1, 1), "P": (1, -1), "S": (2, 1), "I": (2, -1)}


def orientation_from_affine(affine) -> str:
    """Three-letter axis code (e.g. ``RAS``) for the given voxel-to-world affine.

    Each voxel axis is assigned the world axis with the largest absolute
    direction-cosine component, greedily so the result is a permutation even
    for oblique affines.
    """
    rot = np.asarray(affine, dtype=float)[:3, :3]
    entries = sorted(
        ((abs(rot[i, j]), i, j) for i in range(3) for j in range(3)), key=lambda t: -t[0]
    )
    assigned: dict[int, tuple[int, int]] = {}
    used_world = set()
    for _, i, j in entries:
        if i in used_world or j in assigned:
            continue
        assigned[j] = (i, 1 if rot[i, j] >= 0 else -1)
        used_world.add(i)
    return "".join(
        _AX_LETTERS[assigned[j][0]][1 if assigned[j][1] > 0 else 0] for j in range(3)
    )


def _validate_orientation_code(code: str) -> None:
    if not isinstance(code, str) or len(code) != 3 or any(c not in _LETTER_AXIS for c in code):
        raise VoxsegError(f"invalid orientation code {code!r}")
    axes = [_LETTER_AXIS[c][0] for c in code]
    if sorted(axes) != [0, 1, 2]:
        raise VoxsegError(f"orientation code {code!r} does not cover all three axes")


@dataclass
class Volume:
    """Channel-first intensity array with geometry.

    data: float32 array of shape (C, X, Y, Z).
    spacing: voxel size (sx, sy, sz) in mm, all strictly positive.
    affine: 4x4 voxel-to-world matrix.
    orientation: three-letter axis code, derived from the affine.
    """

    data: np.ndarray
    spacing: tuple
    affine: np.ndarray
    orientation: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise VoxsegError(f"volume data must be (C, X, Y, Z), got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in self.spacing):
            raise VoxsegError(f"spacing must be three positive finite values, got {self.spacing}")
        self.affine = np.asarray(self.affine, dtype=np.float64)
        if self.affine.shape != (4, 4):
            raise VoxsegError("affine must be 4x4")
        if abs(np.linalg.det(self.affine[:3, :3])) < 1e-12:
            raise VoxsegError("affine is singular")
        norms = np.sqrt((self.affine[:3, :3] ** 2).sum(axis=0))
        rel = np.abs(norms - np.asarray(self.spacing)) / np.asarray(self.spacing)
        if np.any(rel > 1e-3):
            raise VoxsegError(
                f"affine column norms {tuple(norms)} inconsistent with spacing {self.spacing}"
            )
        if not self.orientation:
            self.orientation = orientation_from_affine(self.affine)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple:
        """Spatial dims (X, Y, Z)."""
        return self.data.shape[1:]

    def with_data(self, data: np.ndarray) -> "Volume":
        """Same geometry, new data (channel count may differ)."""
        return Volume(
            data=data, spacing=self.spacing, affine=self.affine, orientation=self.orientation
        )

    def voxel_to_world(self, index) -> np.ndarray:
        hom = np.ones(4)
        hom[:3] = index
        return (self.affine @ hom)[:3]


@dataclass
class SampleUnit:
    """One training/inference unit plus the provenance to undo the extraction.

    ``data`` is (C, H, W) for slices or (C, X, Y, Z) for patches/volumes.
    ``index_or_origin`` is the slice index (int) or the patch origin (triple).
    Geometry fields (volume_shape, spacing, affine, orientation) mirror the
    source volume so predictions can be reassembled into it.
    """

    data: np.ndarray
    kind: str  # "volume" | "slice" | "patch"
    volume_id: str
    slice_axis: int | None = None
    index_or_origin: object = 0
    patch_shape: tuple | None = None
    label: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)
    volume_shape: tuple = ()
    spacing: tuple = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = None
    orientation: str = "RAS"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.label is not None:
            self.label = np.asarray(self.label, dtype=np.float32)
            if self.label.shape[1:] != self.data.shape[1:]:
                raise VoxsegError(
                    f"label spatial dims {self.label.shape[1:]} != data {self.data.shape[1:]}"
                )

    def replace(self, **kw) -> "SampleUnit":
        return replace(self, **kw)


def reorient(volume: Volume, target_orientation: str) -> Volume:
    """Permute/flip voxel axes so they follow ``target_orientation``.

    The affine is updated so every voxel keeps its world coordinate.
    """
    _validate_orientation_code(target_orientation)
    current = volume.orientation

    # current voxel axis j points along world axis world[j] with sign[j]
    world = [_LETTER_AXIS[c][0] for c in current]
    sign = [_LETTER_AXIS[c][1] for c in current]

    perm = []
    flip = []
    for letter in target_orientation:
        w, s = _LETTER_AXIS[letter]
        j = world.index(w)
        perm.append(j)
        flip.append(sign[j] != s)

    data = np.transpose(volume.data, (0,) + tuple(p + 1 for p in perm))
    flip_axes = tuple(k + 1 for k in range(3) if flip[k])
    if flip_axes:
        data = np.flip(data, axis=flip_axes)

    # old_index = T @ new_index (homogeneous), so new affine = old affine @ T
    shape_old = volume.shape
    trans = np.zeros((4, 4))
    trans[3, 3] = 1.0
    for k in range(3):
        j = perm[k]
        if flip[k]:
            trans[j, k] = -1.0
            trans[j, 3] = shape_old[j] - 1
        else:
            trans[j, k] = 1.0
    affine = volume.affine @ trans
    spacing = tuple(volume.spacing[j] for j in perm)
    return Volume(
        data=np.ascontiguousarray(data),
        spacing=spacing,
        affine=affine,
        orientation=target_orientation,
    )


def _geometry_kwargs(volume: Volume, volume_id: str, metadata: dict | None) -> dict:
    return dict(
        volume_id=volume_id,
        metadata=dict(metadata or {}),
        volume_shape=volume.shape,
        spacing=volume.spacing,
        affine=volume.affine,
        orientation=volume.orientation,
    )


def _axis_origins(dim: int, patch: int, stride: int) -> list[int]:
    origins = list(range(0, dim - patch + 1, stride))
    if origins[-1] != dim - patch:
        origins.append(dim - patch)  # clamp final patch to the boundary
    return origins


def extract_units(
    volume: Volume,
    mode: str,
    slice_axis: int = 2,
    patch_shape: tuple | None = None,
    stride=None,
    label: Volume | None = None,
    volume_id: str = "",
    metadata: dict | None = None,
) -> list[SampleUnit]:
    """Split a volume (and aligned label) into sample units.

    slice mode: one unit per index along ``slice_axis``.
    patch mode: tiles of ``patch_shape`` at ``stride``, the final patch per
    axis clamped to the boundary so every voxel is covered.
    volume mode: a single unit.
    """
    if label is not None and label.shape != volume.shape:
        raise VoxsegError(
            f"label spatial shape {label.shape} != volume {volume.shape}"
        )
    common = _geometry_kwargs(volume, volume_id, metadata)

    if mode == "volume":
        return [
            SampleUnit(
                data=volume.data,
                kind="volume",
                label=None if label is None else label.data,
                **common,
            )
        ]

    if mode == "slice":
        if slice_axis not in (0, 1, 2):
            raise VoxsegError(f"slice_axis must be 0, 1, or 2, got {slice_axis}")
        units = []
        for idx in range(volume.shape[slice_axis]):
            sl = np.take(volume.data, idx, axis=slice_axis + 1)
            lab = None if label is None else np.take(label.data, idx, axis=slice_axis + 1)
            units.append(
                SampleUnit(
                    data=sl,
                    kind="slice",
                    slice_axis=slice_axis,
                    index_or_origin=idx,
                    label=lab,
                    **common,
                )
            )
        return units

    if mode == "patch":
        if patch_shape is None:
            raise VoxsegError("patch mode requires patch_shape")
        patch_shape = tuple(int(p) for p in patch_shape)
        if any(p > d for p, d in zip(patch_shape, volume.shape)):
            raise VoxsegError(f"patch shape {patch_shape} exceeds volume dims {volume.shape}")
        if stride is None:
            stride = patch_shape
        if np.isscalar(stride):
            stride = (int(stride),) * 3
        stride = tuple(int(s) for s in stride)
        if any(s < 1 for s in stride):
            raise VoxsegError(f"stride must be >= 1, got {stride}")
        units = []
        for ox in _axis_origins(volume.shape[0], patch_shape[0], stride[0]):
            for oy in _axis_origins(volume.shape[1], patch_shape[1], stride[1]):
                for oz in _axis_origins(volume.shape[2], patch_shape[2], stride[2]):
                    sel = (
                        slice(None),
                        slice(ox, ox + patch_shape[0]),
                        slice(oy, oy + patch_shape[1]),
                        slice(oz, oz + patch_shape[2]),
                    )
                    units.append(
                        SampleUnit(
                            data=volume.data[sel],
                            kind="patch",
                            index_or_origin=(ox, oy, oz),
                            patch_shape=patch_shape,
                            label=None if label is None else label.data[sel],
                            **common,
                        )
                    )
        return units

    raise VoxsegError(f"unknown extraction mode {mode!r}")


def reconstruct_volume(units: list[SampleUnit], predictions: list[np.ndarray]) -> Volume:
    """Place per-unit predictions back into the source geometry.

    Overlapping voxels are averaged (float64 accumulation, so echoing the
    extracted data back reproduces the source bit-exactly); voxels not
    covered by any unit are 0.
    """
    if len(units) != len(predictions):
        raise VoxsegError(f"{len(units)} units but {len(predictions)} predictions")
    if not units:
        raise VoxsegError("cannot reconstruct from zero units")
    vol_ids = {u.volume_id for u in units}
    if len(vol_ids) != 1:
        raise VoxsegError(f"units come from multiple volumes: {sorted(vol_ids)}")

    ref = units[0]
    channels = np.asarray(predictions[0]).shape[0]
    shape = (channels,) + tuple(ref.volume_shape)
    acc = np.zeros(shape, dtype=np.float64)
    count = np.zeros(ref.volume_shape, dtype=np.float64)

    for unit, pred in zip(units, predictions):
        pred = np.asarray(pred)
        if pred.shape[1:] != unit.data.shape[1:]:
            raise VoxsegError(
                f"prediction spatial shape {pred.shape[1:]} != unit shape {unit.data.shape[1:]}"
            )
        if unit.kind == "volume":
            acc += pred
            count += 1.0
        elif unit.kind == "slice":
            sel = [slice(None)] * 3
            sel[unit.slice_axis] = unit.index_or_origin
            acc[(slice(None),) + tuple(sel)] += pred
            count[tuple(sel)] += 1.0
        elif unit.kind == "patch":
            ox, oy, oz = unit.index_or_origin
            px, py, pz = pred.shape[1:]
            sel = (slice(ox, ox + px), slice(oy, oy + py), slice(oz, oz + pz))
            acc[(slice(None),) + sel] += pred
            count[sel] += 1.0
        else:
            raise VoxsegError(f"unknown unit kind {unit.kind!r}")

    covered = count > 0
    acc[:, covered] /= count[covered]
    return Volume(
        data=acc.astype(np.float32),
        spacing=ref.spacing,
        affine=ref.affine,
        orientation=ref.orientation,
    )


def bounding_box(mask: Volume, margin_voxels: int = 0) -> tuple:
    """Tight inclusive box around nonzero voxels, dilated by ``margin_voxels``
    and clamped to the volume bounds. Raises :class:`EmptyMaskError` when the
    mask has no foreground."""
    nz = np.nonzero(np.any(mask.data > 0, axis=0))
    if nz[0].size == 0:
        raise EmptyMaskError("mask contains no foreground voxels")
    lo = [max(int(idx.min()) - margin_voxels, 0) for idx in nz]
    hi = [
        min(int(idx.max()) + margin_voxels, dim - 1)
        for idx, dim in zip(nz, mask.shape)
    ]
    return tuple(lo), tuple(hi)
