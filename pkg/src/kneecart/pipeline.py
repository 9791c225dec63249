"""End-to-end regional quantification of one knee segmentation.

Per compartment (femoral, medial tibial, lateral tibial): extract the
cartilage surfaces, measure thickness by normal ray casting from the
bone-cartilage interface, reconstruct the pseudo-healthy footprint on
the bone surface to estimate full-thickness loss, parcellate it into
the 20 standard regions, and report per-region statistics.  The whole
run is deterministic: rerunning on the same inputs reproduces every
output byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from ._version import __version__
from .fcl import FclResult, estimate_fcl
from .metrics import RegionalReport, RegionRow, regional_quantify
from .morphology import inner_surface_voxels, outer_surface_voxels
from .parcellation import (SurfaceParcellation, detect_intercondylar_notch,
                           labels_to_volume, parcellate_femoral, parcellate_tibial)
from .surface import Surface, SurfacePatch, mesh_from_mask, patch_from_voxels, write_ply
from .thickness import (ThicknessMap, estimate_normals_svd, measure_thickness,
                        reorient_normals, smooth_normals)
from .volume import BinaryMask, LabelVolume, reorient_ras, save_volume
from .warp import DeformationField, apply_field, resample_field

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """Pipeline failure attributed to a named stage."""

    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


@dataclass(frozen=True)
class PipelineConfig:
    side: str = "right"
    femur_label: int = 1
    tibia_label: int = 2
    fc_label: int = 3
    mtc_label: int = 4
    ltc_label: int = 5
    merge_mode: str = "union"
    close_dilate: int = 4
    close_erode: int = 4
    knn: int = 16
    smooth_iterations: int = 3
    max_ray_mm: float = 15.0
    thickness_mean: str = "all"
    svf_steps: int = 7
    condylar_axis: tuple[float, float, float] = (1.0, 0.0, 0.0)
    with_thickness: bool = True
    with_fcl: bool = True

    def __post_init__(self):
        if self.side not in ("left", "right"):
            raise ValueError(f"side must be left or right, got {self.side!r}")
        if self.thickness_mean not in ("all", "covered"):
            raise ValueError(f"thickness_mean must be all or covered, got {self.thickness_mean!r}")
        if self.merge_mode not in ("union", "intersection"):
            raise ValueError(f"merge_mode must be union or intersection, got {self.merge_mode!r}")
        labels = [self.femur_label, self.tibia_label, self.fc_label,
                  self.mtc_label, self.ltc_label]
        if len(set(labels)) != 5 or any(v <= 0 for v in labels):
            raise ValueError(f"labels must be five distinct positive codes, got {labels}")
        for name in ("close_dilate", "close_erode", "knn", "smooth_iterations", "svf_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.max_ray_mm <= 0:
            raise ValueError("max_ray_mm must be positive")
        object.__setattr__(self, "condylar_axis", tuple(float(v) for v in self.condylar_axis))

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    def provenance(self) -> dict:
        digest = hashlib.sha256(self.to_json().encode()).hexdigest()
        return {"tool": "kneecart", "version": __version__, "config_sha256": digest}


@dataclass
class CompartmentResult:
    name: str
    cart_mesh: Surface
    inner: SurfacePatch
    outer: SurfacePatch
    bone_mesh: Surface
    thickness: ThicknessMap | None
    fcl: FclResult | None
    parcellation: SurfaceParcellation
    region_volume: LabelVolume
    notch_world: np.ndarray | None = None


@dataclass
class PipelineResult:
    report: RegionalReport
    atlas: LabelVolume
    compartments: dict[str, CompartmentResult]
    config: PipelineConfig


def _compartment_table(cfg: PipelineConfig):
    return (
        ("femoral", cfg.femur_label, cfg.fc_label, "femoral", None),
        ("medial_tibial", cfg.tibia_label, cfg.mtc_label, "tibial", "medial"),
        ("lateral_tibial", cfg.tibia_label, cfg.ltc_label, "tibial", "lateral"),
    )


def _measure(inner: SurfacePatch, outer: SurfacePatch, cart: BinaryMask,
             cfg: PipelineConfig) -> ThicknessMap | None:
    if len(inner) < 4:
        warnings.warn("interface patch too small for normal estimation; "
                      "thickness skipped")
        return None
    k = min(cfg.knn, len(inner))
    normals = estimate_normals_svd(inner, k=k)
    normals = reorient_normals(normals, cart)
    normals = smooth_normals(normals, cfg.smooth_iterations)
    return measure_thickness(normals, outer, cfg.max_ray_mm)


def _run_compartment(name: str, seg: LabelVolume, warped_template: LabelVolume,
                     bone_label: int, cart_label: int, kind: str,
                     tibial_side: str | None, cfg: PipelineConfig) -> CompartmentResult | None:
    cart = seg.mask([cart_label])
    if cart.count == 0:
        warnings.warn(f"{name}: cartilage label {cart_label} is empty; skipping")
        return None
    bone = seg.mask([bone_label])
    if bone.count == 0:
        raise StageError(name, f"bone label {bone_label} is empty but cartilage is present")

    inner_vox = inner_surface_voxels(cart, bone)
    outer_vox = outer_surface_voxels(cart, inner_vox)
    cart_mesh = mesh_from_mask(cart)
    inner = patch_from_voxels(cart_mesh, inner_vox)
    outer = patch_from_voxels(cart_mesh, outer_vox)

    thick = _measure(inner, outer, cart, cfg) if cfg.with_thickness else None

    bone_mesh = mesh_from_mask(bone)
    footprint = patch_from_voxels(bone_mesh, cart)
    fcl = None
    if cfg.with_fcl:
        axis = np.asarray(cfg.condylar_axis) if kind == "femoral" else None
        fcl = estimate_fcl(bone_mesh, cart, warped_template.mask([cart_label]),
                           kind, cfg.merge_mode, cfg.close_dilate, cfg.close_erode,
                           condylar_axis=axis)
    parc_patch = fcl.pseudo_healthy if fcl is not None else footprint

    notch_world = None
    if kind == "femoral":
        _, notch_world = detect_intercondylar_notch(parc_patch)
        parc = parcellate_femoral(parc_patch, notch_world, cfg.side)
    else:
        parc = parcellate_tibial(parc_patch, cfg.side, tibial_side)

    region_volume = labels_to_volume(parc, cart)
    return CompartmentResult(name, cart_mesh, inner, outer, bone_mesh, thick,
                             fcl, parc, region_volume, notch_world)


def run_pipeline(seg: LabelVolume, config: PipelineConfig = PipelineConfig(),
                 template_seg: LabelVolume | None = None,
                 field: DeformationField | None = None) -> PipelineResult:
    """Quantify one subject.

    ``template_seg`` is the template segmentation; a deformation field
    (already integrated) maps it into subject space.  With no template
    the subject stands in for it and the loss estimate reflects only the
    outline repair of the subject's own footprint.
    """
    try:
        seg = reorient_ras(seg)
    except ValueError as e:
        raise StageError("load", str(e)) from e

    try:
        if template_seg is None:
            warped = seg
            if field is not None:
                raise ValueError("a deformation field without a template segmentation")
        else:
            warped = reorient_ras(template_seg)
            if field is not None:
                if not field.geometry.close_to(seg.geometry):
                    field = resample_field(field, seg.geometry)
                if not warped.geometry.close_to(seg.geometry):
                    raise ValueError("template and subject grids differ; resample the "
                                     "template first")
                warped = apply_field(warped, field)
            elif not warped.geometry.close_to(seg.geometry):
                raise ValueError("template grid differs from the subject and no "
                                 "deformation field was given")
    except ValueError as e:
        raise StageError("warp", str(e)) from e

    rows: list[RegionRow] = []
    compartments: dict[str, CompartmentResult] = {}
    atlas = np.zeros(seg.geometry.dims, dtype=np.int16)
    for name, bone_label, cart_label, kind, tibial_side in _compartment_table(config):
        try:
            res = _run_compartment(name, seg, warped, bone_label, cart_label,
                                   kind, tibial_side, config)
        except StageError:
            raise
        except ValueError as e:
            raise StageError(name, str(e)) from e
        if res is None:
            continue
        compartments[name] = res
        rows.extend(regional_quantify(res.parcellation, res.thickness, res.fcl,
                                      res.region_volume, config.thickness_mean))
        atlas += res.region_volume.voxels.astype(np.int16)

    report = RegionalReport(rows, provenance=config.provenance())
    atlas_vol = LabelVolume(atlas, seg.geometry)
    return PipelineResult(report, atlas_vol, compartments, config)


def save_outputs(result: PipelineResult, out_dir: str | Path) -> list[Path]:
    """Write report.csv/report.json, the 20-region atlas volume, and one
    PLY per compartment (cartilage mesh with a per-vertex thickness
    property, -1 where not measured)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    csv_path = out / "report.csv"
    result.report.to_csv(csv_path)
    written.append(csv_path)
    json_path = out / "report.json"
    result.report.to_json(json_path)
    written.append(json_path)

    atlas_path = out / "atlas.nii.gz"
    save_volume(result.atlas, atlas_path, descrip="region atlas")
    written.append(atlas_path)

    for name, res in sorted(result.compartments.items()):
        th = np.full(len(res.cart_mesh), -1.0)
        if res.thickness is not None:
            vals = np.where(res.thickness.defined, res.thickness.values, -1.0)
            th[res.inner.members] = vals
        ply_path = out / f"{name}_cartilage.ply"
        write_ply(res.cart_mesh, ply_path, vertex_scalars={"thickness": th},
                  comments=(f"kneecart {__version__}", f"compartment {name}"))
        written.append(ply_path)
    return written
