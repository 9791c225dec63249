"""Stationary velocity fields and their integration to deformations.

Fields live on a voxel grid with one 3-vector per voxel: the world-frame
displacement in mm (component order matching the RAS axes).  Integration
uses scaling and squaring: the field is divided by 2**steps and composed
with itself ``steps`` times; composition samples trilinearly with border
clamping.  Applying a deformation pulls values from ``x + d(x)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nifti
from ._interp import nearest, trilinear
from .nifti import FormatError
from .volume import BinaryMask, Geometry, LabelVolume, ScalarVolume

log = logging.getLogger(__name__)

DEFAULT_STEPS = 7
DEFAULT_THRESHOLD = 0.5


def _check_field(vectors: np.ndarray, geometry: Geometry) -> np.ndarray:
    v = np.asarray(vectors, dtype=np.float64)
    if v.shape != (*geometry.dims, 3):
        raise ValueError(f"field shape {v.shape} does not match geometry {geometry.dims} + (3,)")
    if not np.all(np.isfinite(v)):
        raise ValueError("field contains non-finite components")
    return v


@dataclass(frozen=True)
class VelocityField:
    """Stationary velocity field, mm displacement per unit time."""

    vectors: np.ndarray
    geometry: Geometry

    def __post_init__(self):
        object.__setattr__(self, "vectors", _check_field(self.vectors, self.geometry))


@dataclass(frozen=True)
class DeformationField:
    """Dense displacement field in mm."""

    vectors: np.ndarray
    geometry: Geometry

    def __post_init__(self):
        object.__setattr__(self, "vectors", _check_field(self.vectors, self.geometry))


def load_field(path: str | Path, kind: str = "velocity") -> VelocityField | DeformationField:
    """Read a vector field stored as NIfTI-1 with a 4th axis of length 3
    (x/y/z displacement in mm, RAS order)."""
    data, affine, _ = nifti.read_nifti(path)
    if data.ndim == 5 and data.shape[3] == 1 and data.shape[4] == 3:
        data = data[:, :, :, 0, :]
    if data.ndim != 4 or data.shape[3] != 3:
        raise FormatError(f"{path}: expected a 4D field with 3 components, got shape {data.shape}")
    from .volume import _geometry_from_affine

    geom = _geometry_from_affine(data.shape[:3], affine)
    cls = VelocityField if kind == "velocity" else DeformationField
    return cls(data.astype(np.float64), geom)


def save_field(field: VelocityField | DeformationField, path: str | Path, descrip: str = "") -> None:
    nifti.write_nifti(path, field.vectors.astype(np.float32), field.geometry.affine, descrip)


def _index_displacement(vectors: np.ndarray, geometry: Geometry) -> np.ndarray:
    """World-mm displacement converted to voxel-index units."""
    a_inv = np.linalg.inv(geometry.direction * np.asarray(geometry.spacing))
    return vectors @ a_inv.T


def _index_grid(dims) -> np.ndarray:
    axes = [np.arange(n, dtype=np.float64) for n in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def integrate_svf(v: VelocityField, steps: int = DEFAULT_STEPS) -> DeformationField:
    """Scaling and squaring: phi_0 = v / 2**steps, then phi <- phi o phi
    ``steps`` times (trilinear resampling, border clamped)."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    phi = v.vectors / float(2 ** steps)
    grid = _index_grid(v.geometry.dims)
    for _ in range(steps):
        sample_at = grid + _index_displacement(phi, v.geometry)
        phi = phi + trilinear(phi, sample_at)
    return DeformationField(phi, v.geometry)


def negate(field):
    """Pointwise negation; for a velocity field this encodes the inverse
    transform."""
    cls = type(field)
    return cls(-field.vectors, field.geometry)


def compose(f: DeformationField, g: DeformationField) -> DeformationField:
    """Displacement of applying g then f: d(x) = g(x) + f(x + g(x))."""
    if not f.geometry.close_to(g.geometry):
        raise ValueError("fields live on different grids")
    grid = _index_grid(f.geometry.dims)
    sample_at = grid + _index_displacement(g.vectors, g.geometry)
    return DeformationField(g.vectors + trilinear(f.vectors, sample_at), f.geometry)


def resample_field(field: DeformationField, target: Geometry) -> DeformationField:
    """Evaluate a displacement field on another grid.

    Displacements are world-mm vectors, so they interpolate without any
    re-basing; sampling is trilinear with border clamping.  This is how
    a field estimated on a cropped low-resolution grid gets applied at
    the native resolution.
    """
    if field.geometry.close_to(target):
        return DeformationField(field.vectors.copy(), target)
    grid = _index_grid(target.dims)
    world = target.voxel_to_world(grid)
    src_idx = field.geometry.world_to_voxel(world)
    return DeformationField(trilinear(field.vectors, src_idx), target)


def apply_field(vol, field: DeformationField, interp: str | None = None):
    """Warp a volume: output(x) = volume(x + d(x)).

    Labels and masks must use nearest-neighbour sampling; scalars default
    to trilinear.
    """
    if not vol.geometry.close_to(field.geometry):
        raise ValueError("volume and field live on different grids")
    is_labels = isinstance(vol, (LabelVolume, BinaryMask))
    if interp is None:
        interp = "nearest" if is_labels else "trilinear"
    if is_labels and interp != "nearest":
        raise ValueError("label volumes must be warped with nearest-neighbour interpolation")
    if interp not in ("nearest", "trilinear"):
        raise ValueError(f"unknown interpolation {interp!r}")

    grid = _index_grid(field.geometry.dims)
    sample_at = grid + _index_displacement(field.vectors, field.geometry)

    if isinstance(vol, LabelVolume):
        out = nearest(vol.voxels, sample_at)
        return LabelVolume(out, vol.geometry, dict(vol.label_schema))
    if isinstance(vol, BinaryMask):
        out = nearest(vol.bits, sample_at)
        return BinaryMask(out, vol.geometry)
    if interp == "nearest":
        out = nearest(vol.values, sample_at)
    else:
        out = trilinear(vol.values, sample_at).astype(vol.values.dtype)
    return ScalarVolume(out, vol.geometry)


def probability_map(masks: list[BinaryMask]) -> ScalarVolume:
    """Voxelwise mean of binary masks on a shared grid."""
    if not masks:
        raise ValueError("need at least one mask")
    geom = masks[0].geometry
    for m in masks[1:]:
        if not m.geometry.close_to(geom):
            raise ValueError("masks live on different grids")
    acc = np.zeros(geom.dims, dtype=np.float64)
    for m in masks:
        acc += m.bits
    return ScalarVolume((acc / len(masks)).astype(np.float64), geom)


def threshold_map(prob: ScalarVolume, threshold: float = DEFAULT_THRESHOLD) -> BinaryMask:
    """Voxels with probability >= threshold; threshold must lie in (0, 1]."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    return BinaryMask(prob.values >= threshold, prob.geometry)
