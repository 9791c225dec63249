"""Minimal NIfTI-1 reader/writer.

Only the narrow slice of the format this package needs: single-file
``.nii`` / ``.nii.gz``, 3D scalar or label volumes in {uint8, int16,
int32, float32}, plus 4D vector fields whose 4th axis has length 3.
Anything else is rejected with :class:`FormatError` rather than guessed
at.  Data is returned C-contiguous with shape ``dims`` (index i fastest
in the file, per the format) together with a 4x4 voxel-to-world affine.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
MAGIC_SINGLE = b"n+1\x00"

# datatype code <-> numpy dtype, restricted on purpose
_DTYPE_BY_CODE = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
}
_CODE_BY_DTYPE = {v: k for k, v in _DTYPE_BY_CODE.items()}


class FormatError(ValueError):
    """Raised when a file is not NIfTI-1 or uses an unsupported feature."""


def _header_dtype(byteorder: str) -> np.dtype:
    return np.dtype(
        [
            ("sizeof_hdr", "i4"),
            ("data_type", "S10"),
            ("db_name", "S18"),
            ("extents", "i4"),
            ("session_error", "i2"),
            ("regular", "S1"),
            ("dim_info", "u1"),
            ("dim", "i2", (8,)),
            ("intent_p1", "f4"),
            ("intent_p2", "f4"),
            ("intent_p3", "f4"),
            ("intent_code", "i2"),
            ("datatype", "i2"),
            ("bitpix", "i2"),
            ("slice_start", "i2"),
            ("pixdim", "f4", (8,)),
            ("vox_offset", "f4"),
            ("scl_slope", "f4"),
            ("scl_inter", "f4"),
            ("slice_end", "i2"),
            ("slice_code", "u1"),
            ("xyzt_units", "u1"),
            ("cal_max", "f4"),
            ("cal_min", "f4"),
            ("slice_duration", "f4"),
            ("toffset", "f4"),
            ("glmax", "i4"),
            ("glmin", "i4"),
            ("descrip", "S80"),
            ("aux_file", "S24"),
            ("qform_code", "i2"),
            ("sform_code", "i2"),
            ("quatern_b", "f4"),
            ("quatern_c", "f4"),
            ("quatern_d", "f4"),
            ("qoffset_x", "f4"),
            ("qoffset_y", "f4"),
            ("qoffset_z", "f4"),
            ("srow_x", "f4", (4,)),
            ("srow_y", "f4", (4,)),
            ("srow_z", "f4", (4,)),
            ("intent_name", "S16"),
            ("magic", "S4"),
        ]
    ).newbyteorder(byteorder)


def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _quaternion_affine(hdr: np.void) -> np.ndarray:
    b = float(hdr["quatern_b"])
    c = float(hdr["quatern_c"])
    d = float(hdr["quatern_d"])
    a = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a) if a > 0 else 0.0
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    pixdim = np.asarray(hdr["pixdim"], dtype=np.float64)
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    scale = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
    aff = np.eye(4)
    aff[:3, :3] = rot * scale
    aff[:3, 3] = [hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]]
    return aff


def read_nifti(path: str | Path) -> tuple[np.ndarray, np.ndarray, str]:
    """Read a NIfTI-1 file.

    Returns (data, affine, descrip).  ``data`` keeps the on-disk dtype
    and has shape ``dim[1:1+ndim]`` in C order (first index fastest on
    disk).  ``affine`` maps voxel index (i, j, k) to world mm.
    """
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: file shorter than a NIfTI-1 header")

    hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=_header_dtype("="))[0]
    byteorder = "="
    if int(hdr["sizeof_hdr"]) != HEADER_SIZE:
        hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=_header_dtype("S"))[0]
        byteorder = "S"
        if int(hdr["sizeof_hdr"]) != HEADER_SIZE:
            raise FormatError(f"{path}: not a NIfTI-1 file (bad sizeof_hdr)")
    # numpy strips trailing NULs from S4 fields, so pad before comparing
    magic = bytes(hdr["magic"]).ljust(4, b"\x00")
    if magic != MAGIC_SINGLE:
        raise FormatError(f"{path}: unsupported magic {magic!r}; only single-file n+1 is handled")

    code = int(hdr["datatype"])
    if code not in _DTYPE_BY_CODE:
        raise FormatError(f"{path}: unsupported datatype code {code}; allowed: uint8, int16, int32, float32")
    dtype = _DTYPE_BY_CODE[code].newbyteorder(byteorder)

    dim = np.asarray(hdr["dim"], dtype=int)
    ndim = int(dim[0])
    if not 1 <= ndim <= 7:
        raise FormatError(f"{path}: invalid dim[0]={ndim}")
    shape = tuple(int(n) for n in dim[1 : 1 + ndim])
    if any(n < 1 for n in shape):
        raise FormatError(f"{path}: non-positive dimension in {shape}")

    offset = int(hdr["vox_offset"])
    count = int(np.prod(shape))
    nbytes = count * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise FormatError(f"{path}: truncated data section")
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = np.ascontiguousarray(flat.reshape(shape, order="F"))
    if byteorder == "S":
        data = data.astype(data.dtype.newbyteorder("="))

    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    if (slope not in (0.0, 1.0) or inter != 0.0) and not (np.isnan(slope) or np.isnan(inter)):
        if data.dtype != np.float32:
            raise FormatError(f"{path}: intensity rescaling on integer data is not supported")
        data = (data * np.float32(slope) + np.float32(inter)).astype(np.float32)

    if int(hdr["sform_code"]) > 0:
        affine = np.eye(4)
        affine[0] = np.asarray(hdr["srow_x"], dtype=np.float64)
        affine[1] = np.asarray(hdr["srow_y"], dtype=np.float64)
        affine[2] = np.asarray(hdr["srow_z"], dtype=np.float64)
    elif int(hdr["qform_code"]) > 0:
        affine = _quaternion_affine(hdr)
    else:
        affine = np.diag([*np.abs(np.asarray(hdr["pixdim"][1:4], dtype=np.float64)), 1.0])

    descrip = bytes(hdr["descrip"]).split(b"\x00", 1)[0].decode("ascii", errors="replace")
    return data, affine, descrip


def write_nifti(path: str | Path, data: np.ndarray, affine: np.ndarray, descrip: str = "") -> None:
    """Write ``data`` (3D, or 4D with trailing axis 3) as single-file NIfTI-1."""
    path = Path(path)
    data = np.asarray(data)
    if data.dtype not in _CODE_BY_DTYPE:
        raise FormatError(f"cannot write dtype {data.dtype}; allowed: uint8, int16, int32, float32")
    if data.ndim == 4 and data.shape[3] != 3:
        raise FormatError(f"4D output must have a trailing axis of length 3, got {data.shape}")
    if data.ndim not in (3, 4):
        raise FormatError(f"only 3D volumes and 4D vector fields are written, got ndim={data.ndim}")
    affine = np.asarray(affine, dtype=np.float64)
    if affine.shape != (4, 4):
        raise FormatError("affine must be 4x4")

    hdr = np.zeros((), dtype=_header_dtype("<"))
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    dim = np.ones(8, dtype=np.int16)
    dim[0] = data.ndim
    dim[1 : 1 + data.ndim] = data.shape
    hdr["dim"] = dim
    hdr["datatype"] = _CODE_BY_DTYPE[data.dtype]
    hdr["bitpix"] = data.dtype.itemsize * 8
    spacing = np.linalg.norm(affine[:3, :3], axis=0)
    pixdim = np.zeros(8, dtype=np.float32)
    pixdim[0] = 1.0
    pixdim[1:4] = spacing
    hdr["pixdim"] = pixdim
    hdr["vox_offset"] = 352.0
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # NIFTI_UNITS_MM
    hdr["descrip"] = descrip.encode("ascii", errors="replace")[:79]
    hdr["sform_code"] = 2
    hdr["qform_code"] = 0
    hdr["srow_x"] = affine[0].astype(np.float32)
    hdr["srow_y"] = affine[1].astype(np.float32)
    hdr["srow_z"] = affine[2].astype(np.float32)
    hdr["magic"] = MAGIC_SINGLE

    body = hdr.tobytes() + struct.pack("<i", 0) + np.asfortranarray(data).tobytes(order="F")
    if path.suffix == ".gz" or str(path).endswith(".nii.gz"):
        # mtime pinned so identical volumes produce identical bytes
        path.write_bytes(gzip.compress(body, mtime=0))
    else:
        path.write_bytes(body)
