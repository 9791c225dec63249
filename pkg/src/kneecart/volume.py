"""Calibrated voxel volumes: geometry, NIfTI I/O, canonical orientation,
and the masked downsample/crop used to prepare registration inputs.

Arrays are indexed ``[i, j, k]`` and world position is
``origin + direction @ (spacing * index)`` in mm.  After
:func:`reorient_ras` the direction matrix is the identity and index axes
run right/anterior/superior.  Volumes are frozen after construction;
their arrays are marked read-only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nifti
from ._interp import trilinear
from .nifti import FormatError

log = logging.getLogger(__name__)

ORTHOGONALITY_TOL = 1e-6

# label meanings used by the pipeline unless a schema is supplied
DEFAULT_LABEL_SCHEMA = {
    1: "femur",
    2: "tibia",
    3: "femoral_cartilage",
    4: "medial_tibial_cartilage",
    5: "lateral_tibial_cartilage",
}

LABEL_DTYPES = (np.uint8, np.int16, np.int32)


@dataclass(frozen=True)
class Geometry:
    """Grid shape plus the voxel-to-world mapping."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    direction: np.ndarray  # (3, 3), orthonormal columns

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            raise ValueError(f"dims must be three positive ints, got {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        d = np.asarray(self.direction, dtype=np.float64)
        if d.shape != (3, 3):
            raise ValueError("direction must be 3x3")
        if not np.allclose(d.T @ d, np.eye(3), atol=ORTHOGONALITY_TOL):
            raise ValueError("direction matrix has non-orthonormal columns")
        d.setflags(write=False)
        object.__setattr__(self, "dims", tuple(int(x) for x in self.dims))
        object.__setattr__(self, "spacing", tuple(float(x) for x in self.spacing))
        object.__setattr__(self, "origin", tuple(float(x) for x in self.origin))
        object.__setattr__(self, "direction", d)

    @property
    def affine(self) -> np.ndarray:
        a = np.eye(4)
        a[:3, :3] = self.direction * np.asarray(self.spacing)
        a[:3, 3] = self.origin
        return a

    @property
    def voxel_volume_mm3(self) -> float:
        return float(np.prod(self.spacing))

    def voxel_to_world(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.float64)
        return idx @ (self.direction * np.asarray(self.spacing)).T + np.asarray(self.origin)

    def world_to_voxel(self, pos) -> np.ndarray:
        pos = np.asarray(pos, dtype=np.float64) - np.asarray(self.origin)
        inv = np.linalg.inv(self.direction * np.asarray(self.spacing))
        return pos @ inv.T

    def is_ras(self, tol: float = ORTHOGONALITY_TOL) -> bool:
        return bool(np.allclose(self.direction, np.eye(3), atol=tol))

    def close_to(self, other: "Geometry", tol: float = 1e-5) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, atol=tol)
            and np.allclose(self.origin, other.origin, atol=tol)
            and np.allclose(self.direction, other.direction, atol=tol)
        )


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def _check_shape(arr: np.ndarray, geometry: Geometry):
    if arr.shape != geometry.dims:
        raise ValueError(f"array shape {arr.shape} does not match geometry dims {geometry.dims}")


@dataclass(frozen=True)
class ScalarVolume:
    values: np.ndarray
    geometry: Geometry

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.dtype not in (np.float32, np.float64):
            raise ValueError(f"scalar volume must be float32/float64, got {v.dtype}")
        _check_shape(v, self.geometry)
        if not np.all(np.isfinite(v)):
            raise ValueError("scalar volume contains non-finite values")
        object.__setattr__(self, "values", _freeze(v))


@dataclass(frozen=True)
class LabelVolume:
    voxels: np.ndarray
    geometry: Geometry
    label_schema: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.dtype not in LABEL_DTYPES:
            raise ValueError(f"label volume must be uint8/int16/int32, got {v.dtype}")
        _check_shape(v, self.geometry)
        if v.dtype != np.uint8 and v.size and int(v.min()) < 0:
            raise ValueError("label volume contains negative labels")
        object.__setattr__(self, "voxels", _freeze(v))

    def labels_present(self) -> list[int]:
        return [int(x) for x in np.unique(self.voxels) if x != 0]

    def mask(self, labels) -> "BinaryMask":
        labels = np.atleast_1d(labels)
        return BinaryMask(np.isin(self.voxels, labels), self.geometry)


@dataclass(frozen=True)
class BinaryMask:
    bits: np.ndarray
    geometry: Geometry

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.dtype != np.bool_:
            b = b.astype(bool)
        _check_shape(b, self.geometry)
        object.__setattr__(self, "bits", _freeze(b))

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    @property
    def volume_mm3(self) -> float:
        return self.count * self.geometry.voxel_volume_mm3


@dataclass(frozen=True)
class CropRecord:
    """Everything needed to map a cropped low-resolution grid back to the
    source grid: the scale factor, the crop offset in the scaled grid,
    and the source geometry."""

    scale: float
    crop_offset: tuple[int, int, int]
    source_geometry: Geometry


# --- NIfTI I/O -------------------------------------------------------------


def _geometry_from_affine(dims, affine: np.ndarray) -> Geometry:
    lin = affine[:3, :3]
    spacing = np.linalg.norm(lin, axis=0)
    if np.any(spacing <= 0):
        raise FormatError(f"degenerate voxel spacing {spacing}")
    direction = lin / spacing
    if not np.allclose(direction.T @ direction, np.eye(3), atol=1e-4):
        raise FormatError("non-orthogonal direction matrix; sheared grids are not supported")
    # re-orthonormalize so float32 header rounding never trips validation
    u, _, vt = np.linalg.svd(direction)
    direction = u @ vt
    return Geometry(tuple(int(d) for d in dims), tuple(float(s) for s in spacing),
                    tuple(float(o) for o in affine[:3, 3]), direction)


def load_volume(path: str | Path, label_schema: dict[int, str] | None = None) -> LabelVolume | ScalarVolume:
    """Load a 3D NIfTI-1 volume.

    Integer files come back as :class:`LabelVolume` (with ``label_schema``
    attached, defaulting to the pipeline's five-tissue schema), float
    files as :class:`ScalarVolume`.
    """
    data, affine, _ = nifti.read_nifti(path)
    if data.ndim != 3:
        squeezed = data.squeeze()
        if squeezed.ndim != 3:
            raise FormatError(f"{path}: expected a 3D volume, got shape {data.shape}")
        data = np.ascontiguousarray(squeezed)
    geom = _geometry_from_affine(data.shape, affine)
    if data.dtype == np.float32:
        return ScalarVolume(data, geom)
    schema = DEFAULT_LABEL_SCHEMA if label_schema is None else label_schema
    return LabelVolume(data, geom, dict(schema))


def save_volume(vol: LabelVolume | ScalarVolume | BinaryMask, path: str | Path, descrip: str = "") -> None:
    if isinstance(vol, BinaryMask):
        data = vol.bits.astype(np.uint8)
    elif isinstance(vol, LabelVolume):
        data = vol.voxels
    else:
        data = vol.values.astype(np.float32)
    nifti.write_nifti(path, data, vol.geometry.affine, descrip)


# --- canonical orientation ---------------------------------------------------


def _ras_permutation(direction: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Greedy dominant-axis assignment: voxel axis -> (world axis, sign)."""
    d = np.abs(direction.copy())
    axis_of = np.full(3, -1)
    for _ in range(3):
        w, v = np.unravel_index(np.argmax(d), d.shape)
        axis_of[v] = w
        d[w, :] = -1.0
        d[:, v] = -1.0
    signs = np.array([np.sign(direction[axis_of[v], v]) or 1.0 for v in range(3)])
    return axis_of, signs


def reorient_ras(vol):
    """Permute/flip voxel axes so index axes run right/anterior/superior.

    World positions of all voxels are preserved; only the array layout
    and the geometry bookkeeping change.  Volumes whose direction matrix
    is already the identity are returned unchanged.
    """
    geom = vol.geometry
    if geom.is_ras():
        return vol

    arr = vol.voxels if isinstance(vol, LabelVolume) else (vol.bits if isinstance(vol, BinaryMask) else vol.values)
    affine = geom.affine.copy()
    dims = np.array(geom.dims)

    axis_of, signs = _ras_permutation(geom.direction)
    # flip before permuting: adjust origin by the span of each flipped axis
    for v in range(3):
        if signs[v] < 0:
            affine[:3, 3] += affine[:3, v] * (dims[v] - 1)
            affine[:3, v] *= -1.0
            arr = np.flip(arr, axis=v)
    order = np.argsort(axis_of)  # voxel axes sorted by their world axis
    arr = np.transpose(arr, order)
    affine[:3, :3] = affine[:3, :3][:, order]

    new_geom = _geometry_from_affine(arr.shape, affine)
    if isinstance(vol, LabelVolume):
        return LabelVolume(np.ascontiguousarray(arr), new_geom, dict(vol.label_schema))
    if isinstance(vol, BinaryMask):
        return BinaryMask(np.ascontiguousarray(arr), new_geom)
    return ScalarVolume(np.ascontiguousarray(arr), new_geom)


# --- masked downsample + crop ------------------------------------------------

DOWNSAMPLE_SCALE = 0.5


def _scaled_dims(dims, scale: float) -> np.ndarray:
    return np.maximum(1, np.floor(np.array(dims) * scale)).astype(int)


def mask_downsample_crop(
    img: ScalarVolume,
    seg: LabelVolume,
    target_dims: tuple[int, int, int],
    scale: float = DOWNSAMPLE_SCALE,
) -> tuple[ScalarVolume, CropRecord]:
    """Zero the image outside the segmentation, downsample by ``scale``
    (trilinear, pixel-centre convention), and crop a ``target_dims``
    window centred on the labelled mass.

    Returns the cropped volume plus the :class:`CropRecord` needed by
    :func:`restore_resolution` to map low-resolution labels back.
    """
    if not img.geometry.close_to(seg.geometry):
        raise ValueError("image and segmentation geometry differ")
    fg = seg.voxels != 0
    if not fg.any():
        raise ValueError("segmentation is empty; cannot centre the crop window")

    masked = np.where(fg, img.values, 0.0).astype(np.float64)
    low_dims = _scaled_dims(img.geometry.dims, scale)
    target = np.asarray(target_dims, dtype=int)
    if np.any(target > low_dims):
        raise ValueError(f"crop window {tuple(target)} exceeds scaled grid {tuple(low_dims)}")

    # centroid of labelled voxels, mapped into the scaled grid
    centroid = np.array(np.nonzero(fg), dtype=np.float64).mean(axis=1)
    centroid_low = (centroid + 0.5) * scale - 0.5
    offset = np.rint(centroid_low - (target - 1) / 2.0).astype(int)
    offset = np.clip(offset, 0, low_dims - target)

    axes = [
        (np.arange(target[a]) + offset[a] + 0.5) / scale - 0.5
        for a in range(3)
    ]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    low = trilinear(masked, grid).astype(np.float32)

    spacing = np.asarray(img.geometry.spacing) / scale
    corner = (np.asarray(offset) + 0.5) / scale - 0.5
    origin = img.geometry.voxel_to_world(corner)
    geom = Geometry(tuple(int(t) for t in target), tuple(spacing), tuple(origin), img.geometry.direction)
    rec = CropRecord(scale, tuple(int(o) for o in offset), img.geometry)
    return ScalarVolume(low, geom), rec


def restore_resolution(low: LabelVolume, rec: CropRecord) -> LabelVolume:
    """Map a low-resolution label crop back onto the source grid
    (nearest-neighbour); voxels outside the restored window are 0."""
    src_dims = rec.source_geometry.dims
    scale = rec.scale

    index_maps = []
    valid = np.ones(src_dims, dtype=bool)
    for a in range(3):
        s = np.arange(src_dims[a])
        il = np.rint((s + 0.5) * scale - 0.5).astype(int) - rec.crop_offset[a]
        ok = (il >= 0) & (il < low.geometry.dims[a])
        index_maps.append(np.clip(il, 0, low.geometry.dims[a] - 1))
        shape = [1, 1, 1]
        shape[a] = src_dims[a]
        valid &= ok.reshape(shape)

    block = low.voxels[np.ix_(*index_maps)]
    out = np.where(valid, block, 0).astype(low.voxels.dtype)
    return LabelVolume(out, rec.source_geometry, dict(low.label_schema))
