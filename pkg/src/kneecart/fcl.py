"""Full-thickness cartilage-loss estimation on the bone surface.

The subject's cartilage and the warped template cartilage are merged,
mapped onto the bone surface as a vertex patch, holes are repaired
(complement-component fill, then outline curve fitting, then a surface
closing), giving the pseudo-healthy footprint.  Subtracting the
subject's actual footprint leaves the denuded patch; its share of the
pseudo-healthy area is the loss percentage.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csgraph

from .surface import Surface, SurfacePatch, patch_from_voxels, surface_close
from .volume import BinaryMask

log = logging.getLogger(__name__)

DEFAULT_CLOSE_DILATE = 4
DEFAULT_CLOSE_ERODE = 4
TIBIAL_FIT_ORDER = 3        # cubic outline envelopes in the plane chart
FEMORAL_FIT_ORDER = 4       # trigonometric order around the condylar axis


@dataclass
class FclResult:
    pseudo_healthy: SurfacePatch
    footprint: SurfacePatch
    fcl_patch: SurfacePatch
    fcl_percent: float


def merge_cartilage_masks(subject: BinaryMask, warped_template: BinaryMask,
                          mode: str = "union") -> BinaryMask:
    """Combine subject and warped-template cartilage.

    ``union`` is the default (the template supplies tissue the subject
    lost); ``intersection`` keeps only agreement and is offered for
    sensitivity checks.
    """
    if not subject.geometry.close_to(warped_template.geometry):
        raise ValueError("masks live on different grids")
    if mode == "union":
        return BinaryMask(subject.bits | warped_template.bits, subject.geometry)
    if mode == "intersection":
        return BinaryMask(subject.bits & warped_template.bits, subject.geometry)
    raise ValueError(f"unknown merge mode {mode!r}")


def _complement_components(patch: SurfacePatch) -> list[np.ndarray]:
    """Connected components of the non-member vertices, as boolean masks."""
    comp = ~patch.members
    ids = np.nonzero(comp)[0]
    if len(ids) == 0:
        return []
    sub = patch.parent.vertex_adjacency[ids][:, ids]
    n, labels = csgraph.connected_components(sub, directed=False)
    out = []
    for c in range(n):
        mask = np.zeros(len(patch.parent), dtype=bool)
        mask[ids[labels == c]] = True
        out.append(mask)
    return out


def fill_holes_connectivity(patch: SurfacePatch) -> SurfacePatch:
    """Add every complement component except the exterior one.

    The exterior is the complement component with the largest vertex
    area (ties broken by smallest vertex id); on a closed voxel surface
    that is the part of the bone not under cartilage.  Holes that merge
    with the exterior (open notches) are deliberately left alone.
    """
    comps = _complement_components(patch)
    if len(comps) <= 1:
        return SurfacePatch(patch.parent, patch.members.copy())
    w = patch.parent.vertex_area
    keyed = sorted(
        range(len(comps)),
        key=lambda i: (-float(w[comps[i]].sum()), int(np.nonzero(comps[i])[0][0])),
    )
    members = patch.members.copy()
    for i in keyed[1:]:
        members |= comps[i]
    return SurfacePatch(patch.parent, members)


# --- outline curve fitting ---------------------------------------------------


def _patch_boundary(patch: SurfacePatch) -> np.ndarray:
    """Member vertices adjacent to a non-member (vertex ids)."""
    touching = patch.parent.neighbours_of(~patch.members)
    return np.nonzero(patch.members & touching)[0]


def _principal_axis(points: np.ndarray) -> np.ndarray:
    centred = points - points.mean(axis=0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    axis = vt[0]
    lead = np.argmax(np.abs(axis))
    return axis * (np.sign(axis[lead]) or 1.0)


def _tibial_chart(patch_pts: np.ndarray, all_pts: np.ndarray):
    """Project onto the patch's dominant plane: coordinates along the two
    leading principal directions plus the off-plane height."""
    centre = patch_pts.mean(axis=0)
    _, _, vt = np.linalg.svd(patch_pts - centre, full_matrices=False)
    basis = vt  # rows: e1, e2, e3
    p = (patch_pts - centre) @ basis.T
    q = (all_pts - centre) @ basis.T
    return p[:, 0], p[:, 1], p[:, 2], q[:, 0], q[:, 1], q[:, 2]


def _femoral_chart(patch_pts: np.ndarray, all_pts: np.ndarray, axis: np.ndarray):
    """Cylindrical chart around the condylar axis: angle, axial position,
    and radius (radius plays the off-chart role)."""
    axis = axis / np.linalg.norm(axis)
    centre = patch_pts.mean(axis=0)
    ref = np.array([0.0, 0.0, 1.0])
    if abs(ref @ axis) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    u = np.cross(axis, ref)
    u /= np.linalg.norm(u)
    w = np.cross(axis, u)

    def chart(pts):
        d = pts - centre
        along = d @ axis
        cu = d @ u
        cw = d @ w
        theta = np.arctan2(cw, cu)
        radius = np.hypot(cu, cw)
        return theta, along, radius

    t_p, a_p, r_p = chart(patch_pts)
    # unwrap angles around the patch median so the arc is contiguous
    med = np.median(t_p)
    t_p = np.mod(t_p - med + np.pi, 2 * np.pi) - np.pi
    t_a, a_a, r_a = chart(all_pts)
    t_a = np.mod(t_a - med + np.pi, 2 * np.pi) - np.pi
    return t_p, a_p, r_p, t_a, a_a, r_a


def _design(x: np.ndarray, order: int, trig: bool, x_scale: float) -> np.ndarray:
    if trig:
        cols = [np.ones_like(x)]
        for k in range(1, order + 1):
            cols += [np.cos(k * x), np.sin(k * x)]
        return np.stack(cols, axis=1)
    xs = x / max(x_scale, 1e-12)
    return np.stack([xs ** p for p in range(order + 1)], axis=1)


def _bin_extremes(x, y, h, side):
    """Reduce a point cloud to its upper (side=+1) or lower (side=-1)
    boundary: the extreme y per bin of width h along x.  Fitting to all
    points instead would let full-range columns at the ends of the chart
    drag the envelope away from the boundary."""
    bins = np.floor((x - x.min()) / max(h, 1e-12)).astype(np.int64)
    order = np.lexsort((side * y, bins))
    bs = bins[order]
    last = np.nonzero(np.r_[bs[1:] != bs[:-1], True])[0]
    sel = order[last]
    return x[sel], y[sel]


def _envelope_fit(x, y, order, trig, side, x_scale, tol):
    """One-sided robust fit: iterate weighted least squares pushing the
    curve toward the upper (side=+1) or lower (side=-1) envelope, then
    shift it to exactly touch the extreme point so the curve never
    floats past the data."""
    b = _design(x, order, trig, x_scale)
    w = np.ones(len(x))
    coef = None
    for _ in range(4):
        bw = b * w[:, None]
        coef, *_ = np.linalg.lstsq(bw, y * w, rcond=None)
        resid = y - b @ coef
        inside = resid * side < -tol
        w = np.where(inside, 0.05, 1.0)
    resid = y - b @ coef
    coef[0] += resid.max() if side > 0 else resid.min()
    return coef


def fill_holes_curvefit(patch: SurfacePatch, compartment: str,
                        condylar_axis: np.ndarray | None = None,
                        domain: SurfacePatch | None = None) -> SurfacePatch:
    """Recover outline bites the component fill cannot see.

    The patch outline is charted in 2D (dominant plane for tibial
    patches, angle/axial cylindrical coordinates around the condylar
    axis for femoral ones).  Four one-sided envelope curves are fitted
    to the outline (cubic polynomials; trigonometric of order 4 for the
    femoral angle direction) and every domain vertex inside all four
    envelopes, at a compatible off-chart height, is added.  Too few
    outline points for the fit order: warns and returns the input.
    """
    if compartment not in ("tibial", "femoral"):
        raise ValueError(f"unknown compartment {compartment!r}")
    parent = patch.parent
    dom = domain.members if domain is not None else np.ones(len(parent), dtype=bool)

    outline = _patch_boundary(patch)
    n_params = 2 * FEMORAL_FIT_ORDER + 1 if compartment == "femoral" else TIBIAL_FIT_ORDER + 1
    if len(outline) < 2 * n_params:
        warnings.warn(f"curve fit skipped: {len(outline)} outline vertices "
                      f"for {n_params}-parameter envelopes")
        return SurfacePatch(parent, patch.members.copy())

    pts = parent.vertices[patch.members]
    if compartment == "tibial":
        up, vp, wp, ua, va, wa = _tibial_chart(pts, parent.vertices)
        trig_u = False
    else:
        axis = condylar_axis if condylar_axis is not None else _principal_axis(parent.vertices)
        up, vp, wp, ua, va, wa = _femoral_chart(pts, parent.vertices, axis)
        trig_u = True
        if float(wp.max() - wp.min()) > max(float(np.median(wp)), 1e-9):
            # radius varies by more than its own magnitude: the patch is
            # nearly planar, angles no longer order the outline, and the
            # radius band stops excluding anything.  the plane projection
            # is well posed in exactly that regime
            up, vp, wp, ua, va, wa = _tibial_chart(pts, parent.vertices)
            trig_u = False

    member_pos = np.nonzero(patch.members)[0]
    pos_in_patch = np.full(len(parent), -1, dtype=np.int64)
    pos_in_patch[member_pos] = np.arange(len(member_pos))
    bidx = pos_in_patch[outline]
    bu, bv = up[bidx], vp[bidx]

    u_scale = max(float(np.abs(bu).max()), 1e-9)
    v_scale = max(float(np.abs(bv).max()), 1e-9)
    # slack below half the lattice pitch: candidates one vertex ring
    # outside a supported envelope must stay outside
    tol = 0.25 * float(min(parent.geometry.spacing))
    # the angular coordinate of the femoral chart is in radians: convert
    # the mm tolerance through the typical cylinder radius
    tol_u = tol / max(float(np.median(wp)), tol) if trig_u else tol

    h = float(min(parent.geometry.spacing))
    h_u = tol_u / 0.25 if trig_u else h  # one lattice pitch in chart units
    order_v = FEMORAL_FIT_ORDER if trig_u else TIBIAL_FIT_ORDER
    n_bins = min(len(np.unique(np.floor((bu - bu.min()) / h_u))),
                 len(np.unique(np.floor((bv - bv.min()) / h))))
    if n_bins <= max(order_v, TIBIAL_FIT_ORDER) + 1:
        warnings.warn(f"curve fit skipped: outline spans only {n_bins} bins")
        return SurfacePatch(parent, patch.members.copy())
    c_vmax = _envelope_fit(*_bin_extremes(bu, bv, h_u, +1), order_v, trig_u, +1, u_scale, tol)
    c_vmin = _envelope_fit(*_bin_extremes(bu, bv, h_u, -1), order_v, trig_u, -1, u_scale, tol)
    c_umax = _envelope_fit(*_bin_extremes(bv, bu, h, +1), TIBIAL_FIT_ORDER, False, +1, v_scale, tol_u)
    c_umin = _envelope_fit(*_bin_extremes(bv, bu, h, -1), TIBIAL_FIT_ORDER, False, -1, v_scale, tol_u)

    order_u = FEMORAL_FIT_ORDER if trig_u else TIBIAL_FIT_ORDER
    bu_a = _design(ua, order_u, trig_u, u_scale)
    bv_a = _design(va, TIBIAL_FIT_ORDER, False, v_scale)
    inside = (
        (ua <= bv_a @ c_umax + tol_u)
        & (ua >= bv_a @ c_umin - tol_u)
        & (va <= bu_a @ c_vmax + tol)
        & (va >= bu_a @ c_vmin - tol)
    )

    band_lo = float(wp.min()) - tol
    band_hi = float(wp.max()) + tol
    inside &= (wa >= band_lo) & (wa <= band_hi)
    inside &= dom

    members = patch.members | inside
    return SurfacePatch(parent, members)


# --- top-level estimate ------------------------------------------------------


def estimate_fcl(bone_surface: Surface, cart: BinaryMask, warped_template: BinaryMask,
                 compartment: str, merge_mode: str = "union",
                 close_dilate: int = DEFAULT_CLOSE_DILATE,
                 close_erode: int = DEFAULT_CLOSE_ERODE,
                 condylar_axis: np.ndarray | None = None) -> FclResult:
    """Denuded-area percentage for one compartment.

    ``bone_surface`` is the mesh of the supporting bone; ``cart`` the
    subject's cartilage mask; ``warped_template`` the template cartilage
    mapped into subject space.  Pass the subject mask itself when no
    template is available; the estimate then captures only what outline
    repair adds on top of the observed footprint.
    """
    merged = merge_cartilage_masks(cart, warped_template, merge_mode)
    covered = patch_from_voxels(bone_surface, merged)
    filled = fill_holes_connectivity(covered)
    filled = fill_holes_curvefit(filled, compartment, condylar_axis=condylar_axis)
    pseudo = surface_close(filled, None, close_dilate, close_erode)
    # closing must never lose the observed footprint
    pseudo = SurfacePatch(bone_surface, pseudo.members | covered.members)

    footprint = patch_from_voxels(bone_surface, cart)
    fcl_patch = pseudo.difference(footprint)

    pseudo_area = pseudo.area_mm2
    if pseudo_area <= 0:
        warnings.warn("pseudo-healthy patch is empty; loss percentage set to 0")
        percent = 0.0
    else:
        percent = 100.0 * fcl_patch.area_mm2 / pseudo_area
    return FclResult(pseudo, footprint, fcl_patch, float(percent))
