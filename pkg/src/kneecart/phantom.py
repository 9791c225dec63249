"""Synthetic knee scenes with analytically known ground truth.

Each builder lays cartilage slabs, shells, or discs onto a wider bone
plate (margin of at least 6 voxels so outline fits never run off the
support) and returns the segmentation together with a truth dictionary.
Spacing is isotropic on purpose: the curve-fit acceptance band then
stays below one voxel and cannot pick up stray vertex rings.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .volume import DEFAULT_LABEL_SCHEMA, BinaryMask, Geometry, LabelVolume

PAD = 2
BONE_MARGIN = 6

FEMUR, TIBIA, FC, MTC, LTC = 1, 2, 3, 4, 5


@dataclass
class Phantom:
    """A synthetic subject: segmentation, optional intact template, and
    the ground-truth quantities the scene was built to have."""

    seg: LabelVolume
    template_seg: LabelVolume | None
    truth: dict = field(default_factory=dict)

    @property
    def geometry(self) -> Geometry:
        return self.seg.geometry

    def mask(self, label: int) -> BinaryMask:
        return self.seg.mask([label])


def _iso_geometry(dims, spacing_mm: float) -> Geometry:
    return Geometry(tuple(int(d) for d in dims), (spacing_mm,) * 3,
                    (0.0, 0.0, 0.0), np.eye(3))


def _seg(labels: np.ndarray, geom: Geometry, template: np.ndarray | None,
         truth: dict) -> Phantom:
    seg = LabelVolume(labels.astype(np.uint8), geom, dict(DEFAULT_LABEL_SCHEMA))
    tmpl = None
    if template is not None:
        tmpl = LabelVolume(template.astype(np.uint8), geom, dict(DEFAULT_LABEL_SCHEMA))
    return Phantom(seg, tmpl, truth)


def make_slab(footprint=(20, 16), thickness: int = 6, bone_depth: int = 4,
              spacing_mm: float = 0.3, bone_label: int = FEMUR,
              cart_label: int = FC) -> Phantom:
    """Flat cartilage slab resting on a wider bone plate."""
    fx, fy = footprint
    if fx < 4 or fy < 4 or thickness < 1 or bone_depth < 1:
        raise ValueError("slab too small to build")
    nx = fx + 2 * (BONE_MARGIN + PAD)
    ny = fy + 2 * (BONE_MARGIN + PAD)
    nz = PAD + bone_depth + thickness + PAD
    geom = _iso_geometry((nx, ny, nz), spacing_mm)

    lab = np.zeros((nx, ny, nz), dtype=np.uint8)
    z0 = PAD
    z1 = z0 + bone_depth
    lab[PAD:nx - PAD, PAD:ny - PAD, z0:z1] = bone_label
    cx0, cy0 = PAD + BONE_MARGIN, PAD + BONE_MARGIN
    lab[cx0:cx0 + fx, cy0:cy0 + fy, z1:z1 + thickness] = cart_label

    s = spacing_mm
    truth = {
        "thickness_mm": thickness * s,
        "footprint_area_mm2": fx * fy * s * s,
        "cart_bounds": ((cx0, cx0 + fx), (cy0, cy0 + fy), (z1, z1 + thickness)),
        "cart_label": cart_label,
        "bone_label": bone_label,
    }
    return _seg(lab, geom, None, truth)


def make_cuboid_defect(footprint=(40, 40), thickness: int = 10,
                       spacing_mm: float = 0.3, defect_width: int = 0,
                       seed: int = 0) -> Phantom:
    """Thickness phantom: a constant-thickness slab, optionally with a
    square full-depth punch well inside the footprint."""
    ph = make_slab(footprint, thickness=thickness, spacing_mm=spacing_mm)
    lab = np.array(ph.seg.voxels)
    (x0, x1), (y0, y1), (z0, z1) = ph.truth["cart_bounds"]
    truth = dict(ph.truth)
    truth["defect_bounds"] = None

    if defect_width > 0:
        fx, fy = footprint
        if defect_width > min(fx, fy) - 8:
            raise ValueError("defect does not fit 4 voxels inside the footprint")
        rng = np.random.default_rng(seed)
        ox = int(rng.integers(4, fx - defect_width - 4 + 1))
        oy = int(rng.integers(4, fy - defect_width - 4 + 1))
        dx0, dy0 = x0 + ox, y0 + oy
        lab[dx0:dx0 + defect_width, dy0:dy0 + defect_width, z0:z1] = 0
        truth["defect_bounds"] = ((dx0, dx0 + defect_width), (dy0, dy0 + defect_width))
    return _seg(lab, ph.geometry, None, truth)


def make_shell(footprint: int = 120, thickness: int = 4, spacing_mm: float = 0.3,
               defect_fraction: float = 0.0, seed: int = 0) -> Phantom:
    """Cartilage loss phantom: a rectangular shell with a full-depth
    strip removed across the whole footprint.

    The footprint is 6:5 on purpose: distinct principal extents keep the
    fitted chart axes pinned, where a square would leave them free to
    rotate.  The strip covers exactly ``defect_fraction`` of the
    footprint area (the fraction must map to a whole voxel count along
    the long axis); the intact shell is returned as the template
    segmentation.
    """
    if not 0.0 <= defect_fraction < 0.8:
        raise ValueError(f"defect_fraction out of range: {defect_fraction}")
    ph = make_slab((footprint, (5 * footprint) // 6), thickness=thickness,
                   spacing_mm=spacing_mm, bone_label=TIBIA, cart_label=MTC)
    intact = np.array(ph.seg.voxels)
    truth = dict(ph.truth)
    truth["defect_fraction"] = 0.0
    truth["strip_bounds"] = None
    if defect_fraction == 0.0:
        return _seg(intact, ph.geometry, None, truth)

    width = int(round(defect_fraction * footprint))
    if abs(width - defect_fraction * footprint) > 1e-9:
        raise ValueError(f"defect_fraction {defect_fraction} is not a whole "
                         f"number of columns on a {footprint}-wide footprint")
    if width > footprint - 12:
        raise ValueError("strip leaves less than 6 intact columns per side")
    rng = np.random.default_rng(seed)
    off = int(rng.integers(6, footprint - width - 6 + 1))
    (x0, _), (y0, y1), (z0, z1) = ph.truth["cart_bounds"]

    lab = np.array(intact)
    lab[x0 + off:x0 + off + width, y0:y1, z0:z1] = 0
    truth["defect_fraction"] = width / footprint
    truth["strip_bounds"] = (x0 + off, x0 + off + width)
    return _seg(lab, ph.geometry, intact, truth)


# --- femoral two-lobe scene ---------------------------------------------------

# lobes and bridge are mirror images about the x = 26.5 plane so left and
# right scenes are exact reflections of each other
_LOBE_X = ((8, 21), (33, 46))   # two condyles, 13 voxels wide each
_BRIDGE_X = (21, 33)            # trochlear bridge between them
_LOBE_Y = (10, 59)
_BRIDGE_Y = (26, 43)
_ARCH_PEAK_Y = 34
_ARCH_HEIGHT = 4
_FEM_NX, _FEM_NY = 54, 68


def _arch(y: int) -> int:
    # narrow parabolic bump: the height-4 plateau spans only three rows,
    # which pins the detected apex to the bridge midline
    t = (y - _ARCH_PEAK_Y) / 2.0
    return max(0, int(round(_ARCH_HEIGHT - t * t)))


def _paint_two_lobe(lab: np.ndarray, z_plate: int, plate_depth: int,
                    cart_thickness: int) -> dict:
    """Femoral plate with two cartilage lobes joined by a bridge that
    drapes over an arched bone ridge; the ridge peak marks the notch.

    The bare plate between the lobes is recessed below the condylar
    plane, like the intercondylar fossa, so surface fits do not read the
    gap floor as denuded cartilage support."""
    zp1 = z_plate + plate_depth
    lab[PAD:_FEM_NX - PAD, PAD:_FEM_NY - PAD, z_plate:zp1] = FEMUR
    for x0, x1 in _LOBE_X:
        lab[x0:x1, _LOBE_Y[0]:_LOBE_Y[1], zp1:zp1 + cart_thickness] = FC
    recess = min(3, plate_depth - 1)
    for y0, y1 in ((_LOBE_Y[0], _BRIDGE_Y[0]), (_BRIDGE_Y[1], _LOBE_Y[1])):
        lab[_BRIDGE_X[0]:_BRIDGE_X[1], y0:y1, zp1 - recess:zp1] = 0
    for y in range(*_BRIDGE_Y):
        a = _arch(y)
        if a > 0:
            lab[_BRIDGE_X[0]:_BRIDGE_X[1], y, zp1:zp1 + a] = FEMUR
        lab[_BRIDGE_X[0]:_BRIDGE_X[1], y, zp1 + a:zp1 + a + cart_thickness] = FC
    return {
        "saddle_x_vox": 0.5 * (_BRIDGE_X[0] + _BRIDGE_X[1] - 1),
        "apex_y_vox": float(_ARCH_PEAK_Y),
        "lobe_x_vox": _LOBE_X,
        "bridge_x_vox": _BRIDGE_X,
        "cart_z0": zp1,
        "cart_thickness": cart_thickness,
    }


def make_two_lobe_fc(spacing_mm: float = 0.5, side: str = "right",
                     plate_depth: int = 4, cart_thickness: int = 4) -> Phantom:
    """Standalone femoral scene for notch detection and parcellation."""
    if side not in ("left", "right"):
        raise ValueError(f"side must be left or right, got {side!r}")
    nz = PAD + plate_depth + cart_thickness + _ARCH_HEIGHT + PAD
    geom = _iso_geometry((_FEM_NX, _FEM_NY, nz), spacing_mm)
    lab = np.zeros(geom.dims, dtype=np.uint8)
    info = _paint_two_lobe(lab, PAD, plate_depth, cart_thickness)

    s = spacing_mm
    truth = {
        "side": side,
        "notch_world": (info["saddle_x_vox"] * s, info["apex_y_vox"] * s,
                        (info["cart_z0"] + _ARCH_HEIGHT - 0.5) * s),
        "saddle_x_tol_mm": 2.0 * s,
        "apex_y_tol_mm": 1.5 * s,
        **info,
    }
    return _seg(lab, geom, None, truth)


# --- tibial disc scene --------------------------------------------------------


def _paint_disc(lab: np.ndarray, centre, semi, z0: int, thickness: int,
                label: int) -> None:
    cx, cy = centre
    ax, ay = semi
    nx, ny = lab.shape[:2]
    i = np.arange(nx)[:, None]
    j = np.arange(ny)[None, :]
    inside = ((i - cx) / ax) ** 2 + ((j - cy) / ay) ** 2 <= 1.0
    lab[:, :, z0:z0 + thickness][inside] = label


def make_tibial_disc(semi_axes=(10.0, 14.0), thickness: int = 4,
                     spacing_mm: float = 0.3, compartment: str = "medial",
                     side: str = "right") -> Phantom:
    """Elliptical tibial cartilage disc, long axis anterior-posterior.

    The centre sits off the voxel lattice so surface vertices enter the
    fitted ellipse one at a time as it grows instead of in symmetric
    groups of four."""
    if compartment not in ("medial", "lateral"):
        raise ValueError(f"compartment must be medial or lateral, got {compartment!r}")
    if side not in ("left", "right"):
        raise ValueError(f"side must be left or right, got {side!r}")
    ax, ay = semi_axes
    nx = int(2 * ax) + 1 + 2 * (BONE_MARGIN + PAD)
    ny = int(2 * ay) + 1 + 2 * (BONE_MARGIN + PAD)
    nz = PAD + 4 + thickness + PAD
    geom = _iso_geometry((nx, ny, nz), spacing_mm)
    lab = np.zeros(geom.dims, dtype=np.uint8)

    lab[PAD:nx - PAD, PAD:ny - PAD, PAD:PAD + 4] = TIBIA
    centre = ((nx - 1) / 2.0 + 0.25, (ny - 1) / 2.0 + 0.3)
    label = MTC if compartment == "medial" else LTC
    _paint_disc(lab, centre, semi_axes, PAD + 4, thickness, label)

    s = spacing_mm
    truth = {
        "side": side,
        "compartment": compartment,
        "cart_label": label,
        "centre_world": (centre[0] * s, centre[1] * s),
        "semi_axes_mm": (ax * s, ay * s),
    }
    return _seg(lab, geom, None, truth)


# --- full synthetic knee ------------------------------------------------------


def make_knee(spacing_mm: float = 0.5, side: str = "right") -> Phantom:
    """Composite scene with all five tissues: a tibial plate carrying a
    medial and a lateral disc, and the two-lobe femoral assembly above."""
    if side not in ("left", "right"):
        raise ValueError(f"side must be left or right, got {side!r}")
    nx, ny = _FEM_NX, _FEM_NY
    tib_z0, tib_depth, disc_t = PAD, 6, 4
    fem_z0 = tib_z0 + tib_depth + disc_t + 7
    fem_depth, fc_t = 4, 4
    nz = fem_z0 + fem_depth + fc_t + _ARCH_HEIGHT + PAD
    geom = _iso_geometry((nx, ny, nz), spacing_mm)
    lab = np.zeros(geom.dims, dtype=np.uint8)

    lab[PAD:nx - PAD, PAD:ny - PAD, tib_z0:tib_z0 + tib_depth] = TIBIA
    # centres mirror exactly under i -> 53 - i and sit off the lattice in
    # both axes so vertex rings never cross the fit boundary in blocks
    semi = (7.0, 10.0)
    medial_x = 16.25 if side == "right" else 36.75
    lateral_x = 53.0 - medial_x
    _paint_disc(lab, (medial_x, 34.3), semi, tib_z0 + tib_depth, disc_t, MTC)
    _paint_disc(lab, (lateral_x, 34.3), semi, tib_z0 + tib_depth, disc_t, LTC)

    info = _paint_two_lobe(lab, fem_z0, fem_depth, fc_t)

    s = spacing_mm
    truth = {
        "side": side,
        "notch_world": (info["saddle_x_vox"] * s, info["apex_y_vox"] * s,
                        (info["cart_z0"] + _ARCH_HEIGHT - 0.5) * s),
        "disc_centres_vox": {"medial": (medial_x, 34.3),
                             "lateral": (lateral_x, 34.3)},
        "disc_semi_axes_vox": semi,
        "fc_thickness_mm": fc_t * s,
        "disc_thickness_mm": disc_t * s,
        **info,
    }
    return _seg(lab, geom, None, truth)


# --- random shapes for operator-law tests ------------------------------------


def random_blob_mask(dims=(28, 28, 28), seed: int = 0, n_boxes: int = 5,
                     spacing_mm: float = 0.5) -> BinaryMask:
    """Union of random overlapping boxes, kept one voxel off the grid
    edge.  Deterministic for a given seed."""
    rng = np.random.default_rng(seed)
    bits = np.zeros(dims, dtype=bool)
    lo = np.ones(3, dtype=int)
    hi = np.array(dims) - 1
    centre = (np.array(dims) - 1) / 2.0
    for k in range(n_boxes):
        size = rng.integers(4, np.maximum(5, np.array(dims) // 2))
        if k == 0:
            start = np.clip((centre - size / 2).astype(int), lo, hi - size)
        else:
            start = np.array([rng.integers(lo[a], max(lo[a] + 1, hi[a] - size[a]))
                              for a in range(3)])
        stop = np.minimum(start + size, hi)
        bits[start[0]:stop[0], start[1]:stop[1], start[2]:stop[2]] = True
    geom = _iso_geometry(dims, spacing_mm)
    return BinaryMask(bits, geom)


_KINDS = {
    "slab": make_slab,
    "cuboid": make_cuboid_defect,
    "shell": make_shell,
    "two-lobe": make_two_lobe_fc,
    "tibial-disc": make_tibial_disc,
    "knee": make_knee,
}


def make_phantom(kind: str, **kwargs) -> Phantom:
    """Dispatch by kind name (see ``_KINDS`` for the accepted names)."""
    try:
        builder = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown phantom kind {kind!r}; "
                         f"expected one of {sorted(_KINDS)}") from None
    return builder(**kwargs)
