"""Knee cartilage morphometrics: thickness, full-thickness loss, and
regional parcellation from bone/cartilage segmentations."""

from ._version import __version__
from .fcl import FclResult, estimate_fcl, fill_holes_connectivity, fill_holes_curvefit
from .metrics import (RegionalReport, RegionRow, cv_rmsd, dsc, grade_to_percent,
                      lncc_image, mse_image, pearson, phr, regional_quantify, rmsd,
                      transfer_thickness)
from .morphology import (Connectivity, boundary, connected_components, fill_gap,
                         inner_surface_voxels, outer_surface_voxels)
from .parcellation import (Region, SurfaceParcellation, detect_intercondylar_notch,
                           labels_to_volume, parcellate_femoral, parcellate_tibial)
from .phantom import Phantom, make_phantom
from .pipeline import (CompartmentResult, PipelineConfig, PipelineResult, StageError,
                       run_pipeline, save_outputs)
from .surface import (PatchBoundaryRestriction, Surface, SurfacePatch, mesh_from_mask,
                      patch_from_voxels, restricted_dilate, surface_close,
                      surface_dilate, surface_erode, write_ply)
from .thickness import (NormalField, ThicknessMap, estimate_normals_svd,
                        measure_thickness, reorient_normals, smooth_normals,
                        thickness_3dnn)
from .volume import (DEFAULT_LABEL_SCHEMA, BinaryMask, CropRecord, Geometry,
                     LabelVolume, ScalarVolume, load_volume, mask_downsample_crop,
                     reorient_ras, restore_resolution, save_volume)
from .warp import (DeformationField, VelocityField, apply_field, compose,
                   integrate_svf, load_field, negate, probability_map,
                   resample_field, save_field, threshold_map)

__all__ = [name for name in dir() if not name.startswith("_")]
