"""Regional quantification and the agreement/similarity metrics used to
validate it.

Mean thickness follows the denuded-area convention: the denominator
counts every vertex of the region on the pseudo-healthy surface, so
full-thickness loss drags the regional mean down instead of vanishing
from it.  A covered-vertices-only mean is available as an alternative.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .fcl import FclResult
from .parcellation import REGION_ORDER, Region, SurfaceParcellation
from .surface import SurfacePatch
from .thickness import ThicknessMap
from .volume import BinaryMask, LabelVolume, ScalarVolume

log = logging.getLogger(__name__)

LNCC_WINDOW = 3
LNCC_EPS = 1e-5

CSV_COLUMNS = ("region", "fcl_percent", "mean_thickness_mm", "surface_area_mm2", "volume_mm3")


# --- scalar metrics ----------------------------------------------------------


def dsc(a: BinaryMask, b: BinaryMask) -> float:
    """Dice similarity; two empty masks count as a perfect match."""
    if not a.geometry.close_to(b.geometry):
        raise ValueError("masks live on different grids")
    na, nb = a.count, b.count
    if na == 0 and nb == 0:
        return 1.0
    inter = int((a.bits & b.bits).sum())
    return 2.0 * inter / (na + nb)


def _series(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).ravel()
    if len(arr) < 2:
        raise ValueError("need at least two values")
    if not np.all(np.isfinite(arr)):
        raise ValueError("series contains non-finite values")
    return arr


def pearson(x, y) -> float:
    """Population-convention correlation coefficient."""
    xa, ya = _series(x), _series(y)
    if len(xa) != len(ya):
        raise ValueError("series lengths differ")
    xc = xa - xa.mean()
    yc = ya - ya.mean()
    den = np.sqrt((xc @ xc) * (yc @ yc))
    if den == 0:
        raise ValueError("zero variance in at least one series")
    return float((xc @ yc) / den)


def rmsd(y_s, y_l) -> float:
    """Root-mean-square deviation between paired measurements."""
    a, b = _series(y_s), _series(y_l)
    if len(a) != len(b):
        raise ValueError("series lengths differ")
    return float(np.sqrt(((a - b) ** 2).sum() / len(a)))


def cv_rmsd(y_s, y_l) -> float:
    """RMSD normalized by the mean of the reference series."""
    b = _series(y_l)
    m = float(b.mean())
    if m == 0:
        raise ValueError("reference series has zero mean")
    return rmsd(y_s, b) / m


def phr(quantified, graded, tolerance: float) -> float:
    """Plausible-hit rate: fraction of graded values lying within the
    closed interval [quantified - tolerance, quantified + tolerance]."""
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    q = np.asarray(quantified, dtype=np.float64).ravel()
    g = np.asarray(graded, dtype=np.float64).ravel()
    if len(q) != len(g) or len(q) == 0:
        raise ValueError("series must be equal-length and non-empty")
    return float((np.abs(g - q) <= tolerance).mean())


def grade_to_percent(grade: int) -> float:
    """Ordinal 0..10 loss grade to its percentage midpoint (10 points per
    grade)."""
    if not 0 <= int(grade) <= 10:
        raise ValueError(f"grade must be in 0..10, got {grade}")
    return float(grade) * 10.0


def mse_image(a: ScalarVolume, b: ScalarVolume) -> float:
    if not a.geometry.close_to(b.geometry):
        raise ValueError("volumes live on different grids")
    diff = a.values.astype(np.float64) - b.values.astype(np.float64)
    return float((diff * diff).mean())


def lncc_image(a: ScalarVolume, b: ScalarVolume, window: int = LNCC_WINDOW,
               eps: float = LNCC_EPS) -> float:
    """Local squared correlation averaged over interior voxels.

    Window is cubic and odd-sized; each variance is floored at ``eps``
    so flat neighbourhoods do not blow up.  Result lies in [0, 1] and is
    returned as a positive similarity.
    """
    if not a.geometry.close_to(b.geometry):
        raise ValueError("volumes live on different grids")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and positive, got {window}")
    half = window // 2
    dims = a.geometry.dims
    if any(d < window for d in dims):
        raise ValueError(f"volume {dims} smaller than the window {window}")

    av = a.values.astype(np.float64)
    bv = b.values.astype(np.float64)
    n = float(window ** 3)

    def box(x):
        return ndimage.uniform_filter(x, size=window, mode="constant") * n

    s_a, s_b = box(av), box(bv)
    s_aa, s_bb, s_ab = box(av * av), box(bv * bv), box(av * bv)
    cov = s_ab - s_a * s_b / n
    var_a = s_aa - s_a * s_a / n
    var_b = s_bb - s_b * s_b / n
    cc = (cov * cov) / (np.maximum(var_a, eps) * np.maximum(var_b, eps))

    interior = tuple(slice(half, d - half) for d in dims)
    return float(np.clip(cc[interior], 0.0, 1.0).mean())


@dataclass
class MeasurementSeries:
    """Paired per-region measurements from two pipelines."""

    name: str
    y_s: np.ndarray
    y_l: np.ndarray

    def __post_init__(self):
        self.y_s = _series(self.y_s)
        self.y_l = _series(self.y_l)
        if len(self.y_s) != len(self.y_l):
            raise ValueError("paired series must have equal length")


# --- regional quantification -------------------------------------------------


def transfer_thickness(thick: ThicknessMap, target: SurfacePatch,
                       radius_mm: float) -> tuple[np.ndarray, np.ndarray]:
    """Carry thickness values from the interface patch onto the target
    patch by nearest vertex within ``radius_mm``.

    Equidistant nearest sources are averaged, so the result does not
    depend on vertex order.  Returns (values, covered): one entry per
    target member, zero where no measurement lies within reach or every
    nearest ray had no hit.
    """
    tgt = target.positions
    values = np.zeros(len(tgt))
    covered = np.zeros(len(tgt), dtype=bool)
    src = thick.patch.positions
    if len(src) == 0:
        return values, covered
    tree = cKDTree(src)
    d, _ = tree.query(tgt, k=1)
    near = np.nonzero(d <= radius_mm)[0]
    ties = tree.query_ball_point(tgt[near], d[near] + 1e-9)
    for t, grp in zip(near, ties):
        got = thick.values[grp]
        ok = np.isfinite(got)
        if ok.any():
            values[t] = got[ok].mean()
            covered[t] = True
    return values, covered


@dataclass
class RegionRow:
    region: Region
    fcl_percent: float
    mean_thickness_mm: float
    surface_area_mm2: float
    volume_mm3: float
    warning: str = ""


@dataclass
class RegionalReport:
    """Fixed 20-row regional table plus provenance."""

    rows: list[RegionRow]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        by_code = {int(r.region): r for r in self.rows}
        full = []
        for region in REGION_ORDER:
            row = by_code.get(int(region))
            if row is None:
                row = RegionRow(region, 0.0, 0.0, 0.0, 0.0, warning="region absent")
            full.append(row)
        self.rows = full
        for r in self.rows:
            for v in (r.fcl_percent, r.mean_thickness_mm, r.surface_area_mm2, r.volume_mm3):
                if not np.isfinite(v):
                    raise ValueError(f"non-finite value in region {r.region.name}")
            if not 0.0 <= r.fcl_percent <= 100.0:
                raise ValueError(f"fcl_percent out of range in {r.region.name}")

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            if self.provenance:
                fh.write(f"# provenance {json.dumps(self.provenance, sort_keys=True)}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for r in self.rows:
                writer.writerow([
                    r.region.name,
                    f"{r.fcl_percent:.6f}",
                    f"{r.mean_thickness_mm:.6f}",
                    f"{r.surface_area_mm2:.6f}",
                    f"{r.volume_mm3:.6f}",
                ])

    def to_json(self, path: str | Path) -> None:
        payload = {
            "provenance": self.provenance,
            "regions": [
                {
                    "region": r.region.name,
                    "code": int(r.region),
                    "fcl_percent": r.fcl_percent,
                    "mean_thickness_mm": r.mean_thickness_mm,
                    "surface_area_mm2": r.surface_area_mm2,
                    "volume_mm3": r.volume_mm3,
                    "warning": r.warning,
                }
                for r in self.rows
            ],
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def regional_quantify(parc: SurfaceParcellation, thick: ThicknessMap | None,
                      fcl: FclResult | None, region_volume: LabelVolume | None,
                      thickness_mean: str = "all") -> list[RegionRow]:
    """Rows for every region present in one parcellation.

    Thickness is transferred from the interface patch onto the
    parcellated surface; with ``thickness_mean='all'`` denuded vertices
    enter the denominator at zero thickness, with ``'covered'`` they are
    excluded.
    """
    if thickness_mean not in ("all", "covered"):
        raise ValueError(f"thickness_mean must be 'all' or 'covered', got {thickness_mean!r}")
    parent = parc.parent
    w = parent.vertex_area
    labelled = SurfacePatch(parent, parc.labels != 0)

    values = np.zeros(len(labelled))
    covered = np.zeros(len(labelled), dtype=bool)
    if thick is not None and len(thick.patch):
        radius = 2.0 * float(np.linalg.norm(parent.geometry.spacing))
        values, covered = transfer_thickness(thick, labelled, radius)
    full_values = np.zeros(len(parent))
    full_values[labelled.members] = values
    full_covered = np.zeros(len(parent), dtype=bool)
    full_covered[labelled.members] = covered

    vol_counts = {}
    if region_volume is not None:
        codes, counts = np.unique(region_volume.voxels, return_counts=True)
        vox_mm3 = region_volume.geometry.voxel_volume_mm3
        vol_counts = {int(c): float(n) * vox_mm3 for c, n in zip(codes, counts) if c != 0}

    rows = []
    for region in parc.regions_present():
        members = parc.region_members(region)
        n = int(members.sum())
        warning = ""
        area = float(w[members].sum())
        if n == 0 or area <= 0:
            warnings.warn(f"region {region.name} is empty")
            rows.append(RegionRow(region, 0.0, 0.0, 0.0, 0.0, warning="empty region"))
            continue

        if thickness_mean == "all":
            mean_th = float(full_values[members].sum()) / n
        else:
            cov = members & full_covered
            mean_th = float(full_values[cov].mean()) if cov.any() else 0.0

        pct = 0.0
        if fcl is not None:
            ph = members & fcl.pseudo_healthy.members
            ph_area = float(w[ph].sum())
            if ph_area > 0:
                lost = members & fcl.fcl_patch.members
                pct = 100.0 * float(w[lost].sum()) / ph_area
            else:
                warning = "region outside pseudo-healthy surface"

        rows.append(RegionRow(region, pct, mean_th, area, vol_counts.get(int(region), 0.0), warning))
    return rows
