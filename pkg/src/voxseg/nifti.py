"""Minimal NIfTI-1 reader/writer.

Covers single-file ``.nii`` / ``.nii.gz`` volumes: dims, pixdim, the
sform/qform voxel-to-world affines (sform preferred), and the common scalar
datatypes. Data is promoted to float32 on read. Written files always use
datatype code 16 (float32) with the affine stored in the sform rows, so a
write/read round-trip preserves dims, pixdim, and datatype bit-exactly.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import NiftiError

HEADER_SIZE = 348
VOX_OFFSET = 352

# NIfTI-1 datatype code -> numpy dtype
_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}

_MAGIC_SINGLE = b"n+1\x00"
_MAGIC_PAIR = b"ni1\x00"


def _read_bytes(path: Path) -> bytes:
    if str(path).endswith(".gz"):
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def _quaternion_affine(b, c, d, qx, qy, qz, pixdim, qfac):
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(a2, 0.0))
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * b * c - 2 * a * d, 2 * b * d + 2 * a * c],
            [2 * b * c + 2 * a * d, a * a + c * c - b * b - d * d, 2 * c * d - 2 * a * b],
            [2 * b * d - 2 * a * c, 2 * c * d + 2 * a * b, a * a + d * d - b * b - c * c],
        ]
    )
    affine = np.eye(4)
    affine[:3, :3] = rot @ np.diag([pixdim[0], pixdim[1], qfac * pixdim[2]])
    affine[:3, 3] = (qx, qy, qz)
    return affine


def read_nifti(path, nan_policy: str = "error"):
    """Read a NIfTI-1 file into a :class:`~voxseg.volume.Volume`.

    The affine is taken from the sform when sform_code > 0, else the qform,
    else a diagonal pixdim fallback. 3D files become single-channel volumes;
    4D files map the fourth dimension to channels. ``nan_policy`` is either
    ``"error"`` (reject NaNs) or ``"zero"`` (impute with 0).
    """
    from .volume import Volume, orientation_from_affine

    path = Path(path)
    if not path.exists():
        raise NiftiError(f"file not found: {path}")
    raw = _read_bytes(path)
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"{path}: truncated file ({len(raw)} bytes, header needs {HEADER_SIZE})")

    if struct.unpack_from("<i", raw, 0)[0] == HEADER_SIZE:
        en = "<"
    elif struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
        en = ">"
    else:
        raise NiftiError(f"{path}: not a NIfTI-1 file (sizeof_hdr != 348)")

    magic = raw[344:348]
    if magic == _MAGIC_PAIR:
        raise NiftiError(f"{path}: two-file NIfTI (.hdr/.img pairs) is not supported")
    if magic != _MAGIC_SINGLE:
        raise NiftiError(f"{path}: bad magic {magic!r}, expected {_MAGIC_SINGLE!r}")

    dim = struct.unpack_from(en + "8h", raw, 40)
    ndim = dim[0]
    if ndim not in (3, 4):
        raise NiftiError(f"{path}: unsupported dimensionality {ndim} (expected 3 or 4)")
    shape = tuple(int(v) for v in dim[1 : 1 + ndim])
    if any(v < 1 for v in shape):
        raise NiftiError(f"{path}: invalid dim field {shape}")

    datatype = struct.unpack_from(en + "h", raw, 70)[0]
    if datatype not in _DTYPES:
        raise NiftiError(f"{path}: unsupported datatype code {datatype}")

    pixdim = struct.unpack_from(en + "8f", raw, 76)
    vox_offset = int(struct.unpack_from(en + "f", raw, 108)[0])
    scl_slope, scl_inter = struct.unpack_from(en + "2f", raw, 112)
    qform_code, sform_code = struct.unpack_from(en + "2h", raw, 252)

    if sform_code > 0:
        srow = struct.unpack_from(en + "12f", raw, 280)
        affine = np.eye(4)
        affine[0, :] = srow[0:4]
        affine[1, :] = srow[4:8]
        affine[2, :] = srow[8:12]
    elif qform_code > 0:
        b, c, d, qx, qy, qz = struct.unpack_from(en + "6f", raw, 256)
        qfac = -1.0 if pixdim[0] == -1.0 else 1.0
        affine = _quaternion_affine(b, c, d, qx, qy, qz, pixdim[1:4], qfac)
    else:
        affine = np.diag([pixdim[1], pixdim[2], pixdim[3], 1.0]).astype(float)

    dtype = np.dtype(_DTYPES[datatype]).newbyteorder(en)
    count = int(np.prod(shape))
    avail = (len(raw) - vox_offset) // dtype.itemsize
    if avail < count:
        raise NiftiError(
            f"{path}: truncated file (data holds {avail} values, header promises {count})"
        )
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    data = data.reshape(shape, order="F").astype(np.float32)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = (data * slope + scl_inter).astype(np.float32)

    if np.isnan(data).any():
        if nan_policy == "zero":
            data = np.nan_to_num(data, nan=0.0)
        else:
            raise NiftiError(f"{path}: volume contains NaN values")

    if ndim == 3:
        data = data[np.newaxis]
    else:
        data = np.moveaxis(data, 3, 0)

    spacing = tuple(float(abs(p)) for p in pixdim[1:4])
    return Volume(
        data=np.ascontiguousarray(data),
        spacing=spacing,
        affine=affine.astype(np.float64),
        orientation=orientation_from_affine(affine),
    )


def write_nifti(volume, path) -> None:
    """Write ``volume`` as a single-file NIfTI-1, float32, affine in the sform."""
    path = Path(path)
    if not path.parent.exists():
        raise NiftiError(f"cannot write {path}: parent directory does not exist")

    data = np.asarray(volume.data, dtype=np.float32)
    channels = data.shape[0]
    spatial = data.shape[1:]
    if channels == 1:
        ndim, shape = 3, spatial
        payload = data[0]
    else:
        ndim, shape = 4, spatial + (channels,)
        payload = np.moveaxis(data, 0, 3)

    dim = [ndim] + list(shape) + [1] * (7 - len(shape))
    pixdim = [1.0] + [float(s) for s in volume.spacing] + [1.0] * 4

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, 16)  # datatype float32
    struct.pack_into("<h", hdr, 72, 32)  # bitpix
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform_code=0, sform_code=1
    affine = np.asarray(volume.affine, dtype=np.float64)
    struct.pack_into("<12f", hdr, 280, *affine[:3, :].reshape(-1).astype(np.float32))
    hdr[344:348] = _MAGIC_SINGLE

    blob = bytes(hdr) + b"\x00" * (VOX_OFFSET - HEADER_SIZE)
    blob += np.asfortranarray(payload).tobytes(order="F")

    try:
        if str(path).endswith(".gz"):
            with gzip.open(path, "wb") as f:
                f.write(blob)
        else:
            path.write_bytes(blob)
    except OSError as exc:
        raise NiftiError(f"cannot write {path}: {exc}") from exc
