"""Anatomical parcellation of cartilage surfaces into 20 regions.

Femoral cartilage splits at the intercondylar notch into medial/lateral
condyles, each cut into anterior, posterior, and three equal-area
central strips.  Each tibial compartment gets a central ellipse scaled
to hold 20% of the patch area plus four peripheral quadrants.  Region
codes are fixed so reports and atlas volumes are comparable across
subjects.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from scipy.spatial import cKDTree

from .surface import Surface, SurfacePatch
from .volume import BinaryMask, LabelVolume

log = logging.getLogger(__name__)

CENTRAL_ELLIPSE_FRACTION = 0.20
CENTRAL_ELLIPSE_TOL = 0.005
POSTERIOR_SPLIT_FRACTION = 0.60


class Region(IntEnum):
    """Region codes in fixed reporting order."""

    aMFC = 1
    ecMFC = 2
    ccMFC = 3
    icMFC = 4
    pMFC = 5
    aLFC = 6
    ecLFC = 7
    ccLFC = 8
    icLFC = 9
    pLFC = 10
    aMTC = 11
    eMTC = 12
    pMTC = 13
    iMTC = 14
    cMTC = 15
    aLTC = 16
    eLTC = 17
    pLTC = 18
    iLTC = 19
    cLTC = 20


REGION_ORDER = tuple(Region)

_FEMORAL_BANDS = {
    ("medial", "anterior"): Region.aMFC,
    ("medial", "exterior"): Region.ecMFC,
    ("medial", "central"): Region.ccMFC,
    ("medial", "interior"): Region.icMFC,
    ("medial", "posterior"): Region.pMFC,
    ("lateral", "anterior"): Region.aLFC,
    ("lateral", "exterior"): Region.ecLFC,
    ("lateral", "central"): Region.ccLFC,
    ("lateral", "interior"): Region.icLFC,
    ("lateral", "posterior"): Region.pLFC,
}

_TIBIAL_REGIONS = {
    "medial": {"anterior": Region.aMTC, "exterior": Region.eMTC, "posterior": Region.pMTC,
               "interior": Region.iMTC, "central": Region.cMTC},
    "lateral": {"anterior": Region.aLTC, "exterior": Region.eLTC, "posterior": Region.pLTC,
                "interior": Region.iLTC, "central": Region.cLTC},
}


@dataclass
class SurfaceParcellation:
    """Per-vertex region labels over one surface (0 = unlabelled)."""

    parent: Surface
    labels: np.ndarray
    knee_side: str

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.shape != (len(self.parent),):
            raise ValueError("labels must cover every parent vertex")
        if self.knee_side not in ("left", "right"):
            raise ValueError(f"knee_side must be left or right, got {self.knee_side!r}")
        self.labels = lab.astype(np.int16)

    def regions_present(self) -> list[Region]:
        return [Region(c) for c in np.unique(self.labels) if c != 0]

    def region_members(self, region: Region) -> np.ndarray:
        return self.labels == int(region)

    def merge(self, other: "SurfaceParcellation") -> "SurfaceParcellation":
        if other.parent is not self.parent:
            raise ValueError("parcellations belong to different surfaces")
        if self.knee_side != other.knee_side:
            raise ValueError("parcellations disagree on knee side")
        clash = (self.labels != 0) & (other.labels != 0)
        if clash.any():
            raise ValueError(f"parcellations overlap on {int(clash.sum())} vertices")
        return SurfaceParcellation(self.parent, self.labels + other.labels, self.knee_side)


def _medial_sign(side: str) -> float:
    """World-x sign of the medial direction: the medial side of a right
    knee faces the body midline at -x, of a left knee at +x."""
    if side == "right":
        return -1.0
    if side == "left":
        return 1.0
    raise ValueError(f"side must be left or right, got {side!r}")


# --- intercondylar notch -----------------------------------------------------


def detect_intercondylar_notch(fc_patch: SurfacePatch) -> tuple[int, np.ndarray]:
    """Saddle point between the condyles.

    The patch's area profile along the left-right axis is scanned for its
    two dominant lobes; the notch column is the middle of the minimum
    plateau between them, and within that column the notch is the vertex
    maximizing the inferior envelope (the highest point reached by the
    lowest cartilage, i.e. the roof apex of the intercondylar arch).
    Returns (vertex_id, world position).  Falls back to the vertex
    nearest the patch centroid, with a warning, when no two lobes exist.
    """
    ids = fc_patch.vertex_ids
    if len(ids) == 0:
        raise ValueError("empty patch")
    pts = fc_patch.parent.vertices[ids]
    w = fc_patch.parent.vertex_area[ids]
    geom = fc_patch.parent.geometry

    frac = geom.world_to_voxel(pts)
    # mesh vertices sit on half-voxel planes: double the coordinates so
    # every plane gets its own integer bin and no rounding ties occur,
    # then halve back to dense bins so the smoothing and the prominence
    # scan never see interleaved empty columns
    col = np.rint(2.0 * frac[:, 0]).astype(int)
    col = (col - col.min()) // 2
    profile = np.bincount(col, weights=w)
    if len(profile) >= 3:
        profile = np.convolve(profile, np.ones(3) / 3.0, mode="same")

    # second lobe = the column with the largest prominence relative to the
    # global maximum: its height above the deepest valley between them
    m1 = int(np.argmax(profile))
    best_score = 0.0
    m2 = -1
    for c in range(len(profile)):
        span = profile[min(c, m1): max(c, m1) + 1]
        if len(span) < 3:
            continue
        score = min(profile[c], profile[m1]) - span.min()
        if score > best_score:
            best_score = score
            m2 = c
    lobes = [m1, m2] if m2 >= 0 and best_score > 0.1 * profile[m1] else [m1]

    if len(lobes) < 2:
        warnings.warn("no two condylar lobes in the area profile; "
                      "falling back to the centroid vertex")
        centroid = pts.mean(axis=0)
        v = int(np.argmin(np.linalg.norm(pts - centroid, axis=1)))
        return int(ids[v]), pts[v].copy()

    lo, hi = sorted(lobes)
    between = profile[lo : hi + 1]
    vmin = between.min()
    plateau = np.nonzero(between <= vmin + 1e-12)[0] + lo
    saddle_col = int(np.median(plateau))

    in_col = col == saddle_col
    if not in_col.any():
        in_col = np.abs(col - saddle_col) <= 1
    sub_pts = pts[in_col]
    sub_ids = ids[in_col]

    yrow = np.rint(2.0 * geom.world_to_voxel(sub_pts)[:, 1]).astype(int)
    yrow -= yrow.min()
    inferior = np.full(yrow.max() + 1, np.inf)
    np.minimum.at(inferior, yrow, sub_pts[:, 2])
    apex_row = int(np.argmax(np.where(np.isfinite(inferior), inferior, -np.inf)))
    apex_z = inferior[apex_row]
    cand = np.nonzero((yrow == apex_row) & (np.abs(sub_pts[:, 2] - apex_z) <= 1e-9))[0]
    pick = cand[np.argmin(sub_ids[cand])]
    return int(sub_ids[pick]), sub_pts[pick].copy()


# --- femoral -----------------------------------------------------------------


def parcellate_femoral(fc_patch: SurfacePatch, notch_position: np.ndarray,
                       side: str) -> SurfaceParcellation:
    """Split femoral cartilage into the 10 condylar regions.

    Sagittal plane through the notch separates the condyles; the
    anterior plane passes through the notch and the posterior plane lies
    at 60% of the notch-to-posterior-extreme distance; each condyle's
    central band is cut into three equal-area strips from exterior to
    interior.
    """
    notch = np.asarray(notch_position, dtype=np.float64)
    pts_all = fc_patch.parent.vertices
    ids = fc_patch.vertex_ids
    if len(ids) == 0:
        raise ValueError("empty patch")
    pts = pts_all[ids]

    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    pad = 2.0 * float(np.linalg.norm(fc_patch.parent.geometry.spacing))
    if np.any(notch < lo - pad) or np.any(notch > hi + pad):
        raise ValueError(f"notch {notch} lies outside the patch bounding box [{lo}, {hi}]")

    x_n, y_n = notch[0], notch[1]
    y_post = float(pts[:, 1].min())
    y_cut = y_n - POSTERIOR_SPLIT_FRACTION * (y_n - y_post)

    medial_sign = _medial_sign(side)
    w = fc_patch.parent.vertex_area[ids]
    labels = np.zeros(len(pts_all), dtype=np.int16)

    # strict inequality: vertices exactly on the notch plane count as
    # lateral on either side, keeping mirrored knees consistent
    medial = (pts[:, 0] - x_n) * medial_sign > 0
    for condyle, sel in (("medial", medial), ("lateral", ~medial)):
        if not sel.any():
            warnings.warn(f"no vertices on the {condyle} side of the notch")
            continue
        sub_ids = ids[sel]
        sub_pts = pts[sel]
        sub_w = w[sel]

        anterior = sub_pts[:, 1] > y_n
        posterior = sub_pts[:, 1] < y_cut
        central = ~anterior & ~posterior

        labels[sub_ids[anterior]] = int(_FEMORAL_BANDS[(condyle, "anterior")])
        labels[sub_ids[posterior]] = int(_FEMORAL_BANDS[(condyle, "posterior")])

        if central.any():
            away = 1.0 if condyle == "lateral" else -1.0
            outward = (sub_pts[central, 0] - x_n) * medial_sign * -away
            # outward grows toward the exterior rim of this condyle; ties
            # resolve by position so mirrored meshes cut identically
            cpts = sub_pts[central]
            order = np.lexsort((cpts[:, 2], cpts[:, 1], outward))
            cum = np.cumsum(sub_w[central][order])
            total = cum[-1]
            strip = np.searchsorted(cum - 1e-12, [total / 3.0, 2.0 * total / 3.0])
            band_names = ["interior", "central", "exterior"]
            cids = sub_ids[central][order]
            bands = np.full(len(cids), 0)
            bands[strip[0]:] = 1
            bands[strip[1]:] = 2
            for b in range(3):
                labels[cids[bands == b]] = int(_FEMORAL_BANDS[(condyle, band_names[b])])

    return SurfaceParcellation(fc_patch.parent, labels, side)


# --- tibial ------------------------------------------------------------------


def parcellate_tibial(tc_patch: SurfacePatch, side: str,
                      compartment: str,
                      central_fraction: float = CENTRAL_ELLIPSE_FRACTION,
                      tol: float = CENTRAL_ELLIPSE_TOL) -> SurfaceParcellation:
    """Central ellipse plus four peripheral quadrants for one tibial
    compartment.

    The ellipse is aligned with the patch's principal directions, its
    axis ratio is the square root of the singular-value ratio, and it is
    scaled (bisection) until it holds ``central_fraction`` of the patch
    area within ``tol``.  Quadrants are cut by the diagonal planes
    bisecting the principal axes and named by anatomical direction.
    """
    if compartment not in ("medial", "lateral"):
        raise ValueError(f"compartment must be medial or lateral, got {compartment!r}")
    ids = tc_patch.vertex_ids
    if len(ids) < 20:
        raise ValueError(f"patch has {len(ids)} vertices; too few to parcellate")
    pts = tc_patch.parent.vertices[ids]
    w = tc_patch.parent.vertex_area[ids]

    centre = pts.mean(axis=0)
    centred = pts - centre
    _, svals, vt = np.linalg.svd(centred, full_matrices=False)
    e1, e2 = vt[0], vt[1]
    if svals[1] <= 0:
        raise ValueError("degenerate patch: zero spread along the second principal axis")
    ratio = float(np.sqrt(svals[0] / svals[1]))

    a = centred @ e1
    b = centred @ e2
    total = float(w.sum())

    def frac_inside(t: float) -> float:
        inside = (a / (ratio * t)) ** 2 + (b / t) ** 2 <= 1.0
        return float(w[inside].sum()) / total

    t_lo, t_hi = 1e-9, float(np.hypot(a, b).max()) + 1e-9
    for _ in range(200):
        mid = 0.5 * (t_lo + t_hi)
        if frac_inside(mid) < central_fraction:
            t_lo = mid
        else:
            t_hi = mid
    t = t_hi
    achieved = frac_inside(t)
    if abs(achieved - central_fraction) > tol:
        warnings.warn(f"central ellipse holds {achieved:.4f} of the area "
                      f"(target {central_fraction} +/- {tol})")

    central = (a / (ratio * t)) ** 2 + (b / t) ** 2 <= 1.0

    # anatomical identity of the in-plane axes
    ext_sign = 1.0 if (side == "right") == (compartment == "lateral") else -1.0
    _medial_sign(side)  # validates side
    anterior_dir = np.array([0.0, 1.0, 0.0])
    exterior_dir = np.array([ext_sign, 0.0, 0.0])

    if abs(e1 @ anterior_dir) >= abs(e2 @ anterior_dir):
        e_ap, e_ei = e1, e2
    else:
        e_ap, e_ei = e2, e1
    if e_ap @ anterior_dir < 0:
        e_ap = -e_ap
    if e_ei @ exterior_dir < 0:
        e_ei = -e_ei

    u_plus = e_ap + e_ei
    u_minus = e_ap - e_ei
    s_plus = centred @ u_plus >= 0
    s_minus = centred @ u_minus >= 0

    names = np.where(
        s_plus & s_minus, "anterior",
        np.where(~s_plus & ~s_minus, "posterior",
                 np.where(s_plus & ~s_minus, "exterior", "interior")),
    )

    table = _TIBIAL_REGIONS[compartment]
    labels = np.zeros(len(tc_patch.parent), dtype=np.int16)
    labels[ids[central]] = int(table["central"])
    peripheral = ~central
    for name in ("anterior", "exterior", "posterior", "interior"):
        sel = peripheral & (names == name)
        labels[ids[sel]] = int(table[name])
    return SurfaceParcellation(tc_patch.parent, labels, side)


# --- volume transfer ---------------------------------------------------------


def labels_to_volume(parc: SurfaceParcellation, cart: BinaryMask) -> LabelVolume:
    """Label every cartilage voxel with the region of its nearest
    labelled surface vertex (ties go to the smallest region code)."""
    if not parc.parent.geometry.close_to(cart.geometry):
        raise ValueError("parcellation and mask live on different grids")
    labelled = parc.labels != 0
    if not labelled.any():
        raise ValueError("parcellation has no labelled vertices")

    vox = np.argwhere(cart.bits)
    out = np.zeros(cart.geometry.dims, dtype=np.int16)
    if len(vox) == 0:
        return LabelVolume(out, cart.geometry)
    centres = cart.geometry.voxel_to_world(vox)

    tree = cKDTree(parc.parent.vertices[labelled])
    d_best, _ = tree.query(centres, k=1)

    assigned = np.zeros(len(vox), dtype=bool)
    result = np.zeros(len(vox), dtype=np.int16)
    eps = 1e-9
    for region in REGION_ORDER:
        members = parc.labels == int(region)
        if not members.any():
            continue
        rt = cKDTree(parc.parent.vertices[members])
        d_r, _ = rt.query(centres, k=1)
        take = ~assigned & (d_r <= d_best + eps)
        result[take] = int(region)
        assigned |= take
        if assigned.all():
            break

    out[vox[:, 0], vox[:, 1], vox[:, 2]] = result
    return LabelVolume(out, cart.geometry)
