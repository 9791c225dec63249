"""Voxel-face surface meshes and vertex-set patches.

A mask is meshed by emitting one quad (two triangles) per exposed voxel
face, so total mesh area equals the exposed-face area exactly and every
vertex remembers the voxel that generated it.  Patches are boolean
vertex sets over a parent surface; dilation/erosion/closing act on the
shared-edge adjacency graph.  Patch area uses per-vertex weights (each
triangle contributes a third of its area to each corner), which makes
area additive over disjoint patches and exact on the full surface.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse

from .volume import BinaryMask, Geometry

log = logging.getLogger(__name__)

# cyclic in-plane axes for each face axis; quad corners ordered so the
# outward normal follows the exposed direction
_PLANE_AXES = {0: (1, 2), 1: (2, 0), 2: (0, 1)}


class Surface:
    """Triangle mesh extracted from a binary mask.

    Attributes:
        vertices: (N, 3) float64 world positions in mm.
        faces: (M, 3) int32 vertex-index triples, outward oriented.
        source_voxel: (N, 3) int32 index of the generating voxel.
        geometry: grid the mesh was extracted from.
    """

    def __init__(self, vertices: np.ndarray, faces: np.ndarray,
                 source_voxel: np.ndarray, geometry: Geometry):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(faces, dtype=np.int32)
        self.source_voxel = np.ascontiguousarray(source_voxel, dtype=np.int32)
        self.geometry = geometry
        if self.faces.size:
            f = self.faces
            if (f[:, 0] == f[:, 1]).any() or (f[:, 1] == f[:, 2]).any() or (f[:, 0] == f[:, 2]).any():
                raise ValueError("degenerate face with repeated vertex ids")
        self._adjacency = None
        self._vertex_area = None
        self._triangle_area = None

    def __len__(self) -> int:
        return len(self.vertices)

    @property
    def triangle_area(self) -> np.ndarray:
        if self._triangle_area is None:
            p = self.vertices[self.faces]
            cross = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
            self._triangle_area = 0.5 * np.linalg.norm(cross, axis=1)
        return self._triangle_area

    @property
    def area_mm2(self) -> float:
        return float(self.triangle_area.sum())

    @property
    def vertex_area(self) -> np.ndarray:
        """Per-vertex area share: one third of each incident triangle."""
        if self._vertex_area is None:
            w = np.zeros(len(self.vertices))
            np.add.at(w, self.faces.ravel(), np.repeat(self.triangle_area / 3.0, 3))
            self._vertex_area = w
        return self._vertex_area

    @property
    def vertex_adjacency(self) -> sparse.csr_matrix:
        """Symmetric shared-edge adjacency as a CSR matrix."""
        if self._adjacency is None:
            f = self.faces
            rows = np.concatenate([f[:, 0], f[:, 1], f[:, 2], f[:, 1], f[:, 2], f[:, 0]])
            cols = np.concatenate([f[:, 1], f[:, 2], f[:, 0], f[:, 0], f[:, 1], f[:, 2]])
            data = np.ones(len(rows), dtype=np.int32)
            n = len(self.vertices)
            adj = sparse.csr_matrix((data, (rows, cols)), shape=(n, n))
            adj.data[:] = 1
            self._adjacency = adj
        return self._adjacency

    def neighbours_of(self, member_mask: np.ndarray) -> np.ndarray:
        """Vertices adjacent to at least one vertex in ``member_mask``."""
        return (self.vertex_adjacency @ member_mask.astype(np.int32)) > 0


def mesh_from_mask(mask: BinaryMask) -> Surface:
    """Extract the exposed voxel faces of ``mask`` as a triangle mesh."""
    bits = mask.bits
    if not bits.any():
        raise ValueError("empty mask: nothing to mesh")
    dims = np.array(mask.geometry.dims)

    corner_keys = []
    quad_voxels = []
    for axis in range(3):
        for sign in (1, -1):
            shifted = np.zeros_like(bits)
            src = [slice(None)] * 3
            dst = [slice(None)] * 3
            if sign == 1:
                src[axis] = slice(1, None)
                dst[axis] = slice(0, -1)
            else:
                src[axis] = slice(0, -1)
                dst[axis] = slice(1, None)
            shifted[tuple(dst)] = bits[tuple(src)]
            exposed = np.argwhere(bits & ~shifted)
            if len(exposed) == 0:
                continue
            b, c = _PLANE_AXES[axis]
            # doubled-integer corner coordinates (voxel centre = 2 * index)
            base = exposed * 2
            base[:, axis] += sign
            offs = np.zeros((4, 3), dtype=np.int64)
            order = [(-1, -1), (1, -1), (1, 1), (-1, 1)]
            if sign == -1:
                order = order[::-1]
            for ci, (ob, oc) in enumerate(order):
                offs[ci, b] = ob
                offs[ci, c] = oc
            quad = base[:, None, :] + offs[None, :, :]  # (K, 4, 3)
            corner_keys.append(quad.reshape(-1, 3))
            quad_voxels.append(exposed)

    corners = np.concatenate(corner_keys, axis=0)
    voxels = np.concatenate(quad_voxels, axis=0)

    # pack each doubled coordinate into one int64 for fast dedup
    span = int(2 * dims.max() + 3)
    packed = (corners[:, 0] * span + corners[:, 1] + 1) * span + corners[:, 2] + 1
    uniq, first_pos, inverse = np.unique(packed, return_index=True, return_inverse=True)

    vert_half = corners[first_pos].astype(np.float64) / 2.0
    vertices = mask.geometry.voxel_to_world(vert_half)
    source = voxels[first_pos // 4]

    quads = inverse.reshape(-1, 4)
    tris = np.concatenate([quads[:, [0, 1, 2]], quads[:, [0, 2, 3]]], axis=0)
    return Surface(vertices, tris, source, mask.geometry)


@dataclass
class SurfacePatch:
    """Subset of a surface's vertices, stored as a boolean mask."""

    parent: Surface
    members: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.members)
        if m.dtype != np.bool_ or m.shape != (len(self.parent),):
            raise ValueError("members must be a boolean mask over the parent vertices")
        self.members = m.copy()

    def __len__(self) -> int:
        return int(self.members.sum())

    @property
    def vertex_ids(self) -> np.ndarray:
        return np.nonzero(self.members)[0]

    @property
    def positions(self) -> np.ndarray:
        return self.parent.vertices[self.members]

    @property
    def area_mm2(self) -> float:
        return float(self.parent.vertex_area[self.members].sum())

    def induced_faces(self) -> np.ndarray:
        """Faces whose three vertices all belong to the patch."""
        f = self.parent.faces
        keep = self.members[f].all(axis=1)
        return f[keep]

    def union(self, other: "SurfacePatch") -> "SurfacePatch":
        self._check_sibling(other)
        return SurfacePatch(self.parent, self.members | other.members)

    def intersection(self, other: "SurfacePatch") -> "SurfacePatch":
        self._check_sibling(other)
        return SurfacePatch(self.parent, self.members & other.members)

    def difference(self, other: "SurfacePatch") -> "SurfacePatch":
        self._check_sibling(other)
        return SurfacePatch(self.parent, self.members & ~other.members)

    def _check_sibling(self, other: "SurfacePatch"):
        if other.parent is not self.parent:
            raise ValueError("patches belong to different surfaces")


@dataclass
class PatchBoundaryRestriction:
    """Vertices a restricted dilation may never enter."""

    forbidden: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.forbidden)
        if f.dtype != np.bool_:
            raise ValueError("forbidden must be a boolean vertex mask")
        self.forbidden = f.copy()


def patch_from_voxels(s: Surface, v: BinaryMask) -> SurfacePatch:
    """Vertices whose source voxel is set in ``v`` or whose position lies
    within one voxel extent (per axis) of a set voxel.  The distance rule
    is what makes cross-mask mapping work, e.g. cartilage onto the bone
    surface."""
    if not s.geometry.close_to(v.geometry):
        raise ValueError("surface and mask live on different grids")
    bits = v.bits
    src = s.source_voxel
    members = bits[src[:, 0], src[:, 1], src[:, 2]].copy()

    frac = v.geometry.world_to_voxel(s.vertices)
    base = np.rint(frac).astype(np.int64)
    dims = np.array(v.geometry.dims)
    eps = 1e-9
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                cand = base + np.array([dx, dy, dz])
                ok = np.all(np.abs(cand - frac) <= 1.0 + eps, axis=1)
                ok &= np.all((cand >= 0) & (cand < dims), axis=1)
                if not ok.any():
                    continue
                c = cand[ok]
                hit = bits[c[:, 0], c[:, 1], c[:, 2]]
                idx = np.nonzero(ok)[0]
                members[idx[hit]] = True
    return SurfacePatch(s, members)


# --- patch morphology --------------------------------------------------------


def _domain_mask(p: SurfacePatch, domain: SurfacePatch | None) -> np.ndarray:
    if domain is None:
        return np.ones(len(p.parent), dtype=bool)
    if domain.parent is not p.parent:
        raise ValueError("domain patch belongs to a different surface")
    return domain.members


def surface_dilate(p: SurfacePatch, domain: SurfacePatch | None = None, rounds: int = 1) -> SurfacePatch:
    """Grow the patch by adjacency, ``rounds`` times, never leaving the
    domain."""
    dom = _domain_mask(p, domain)
    members = p.members.copy()
    for _ in range(rounds):
        nxt = members | (p.parent.neighbours_of(members) & dom)
        if (nxt == members).all():
            break
        members = nxt
    return SurfacePatch(p.parent, members)


def surface_erode(p: SurfacePatch, rounds: int = 1) -> SurfacePatch:
    """Peel vertices adjacent to any non-member of the parent surface,
    ``rounds`` times."""
    members = p.members.copy()
    for _ in range(rounds):
        touching_outside = p.parent.neighbours_of(~members)
        nxt = members & ~touching_outside
        if (nxt == members).all():
            break
        members = nxt
    return SurfacePatch(p.parent, members)


def surface_close(p: SurfacePatch, domain: SurfacePatch | None = None,
                  dilate_rounds: int = 4, erode_rounds: int = 4) -> SurfacePatch:
    """Dilate then erode; fills holes up to roughly 2*dilate_rounds rings."""
    return surface_erode(surface_dilate(p, domain, dilate_rounds), erode_rounds)


def restricted_dilate(p: SurfacePatch, restriction: PatchBoundaryRestriction,
                      domain: SurfacePatch | None = None) -> SurfacePatch:
    """Dilate to a fixed point inside ``domain`` minus the forbidden set.

    Existing members are kept even if marked forbidden; the restriction
    only blocks growth.
    """
    dom = _domain_mask(p, domain)
    if restriction.forbidden.shape != (len(p.parent),):
        raise ValueError("restriction mask does not match the surface")
    allowed = dom & ~restriction.forbidden
    members = p.members.copy()
    for _ in range(len(p.parent)):
        nxt = members | (p.parent.neighbours_of(members) & allowed)
        if (nxt == members).all():
            break
        members = nxt
    return SurfacePatch(p.parent, members)


# --- PLY export --------------------------------------------------------------


def write_ply(s: Surface, path: str | Path, binary: bool = True,
              vertex_scalars: dict[str, np.ndarray] | None = None,
              vertex_ints: dict[str, np.ndarray] | None = None,
              comments: tuple[str, ...] = ()) -> None:
    """Write the mesh as PLY (binary little-endian by default, ASCII
    otherwise) with optional per-vertex float/int properties."""
    path = Path(path)
    vertex_scalars = vertex_scalars or {}
    vertex_ints = vertex_ints or {}
    n = len(s.vertices)
    for name, arr in {**vertex_scalars, **vertex_ints}.items():
        if len(arr) != n:
            raise ValueError(f"property {name!r} has {len(arr)} values for {n} vertices")

    fmt = "binary_little_endian" if binary else "ascii"
    header = [f"ply", f"format {fmt} 1.0"]
    header += [f"comment {c}" for c in comments]
    header += [f"element vertex {n}"]
    header += [f"property float {ax}" for ax in "xyz"]
    header += [f"property float {name}" for name in vertex_scalars]
    header += [f"property int {name}" for name in vertex_ints]
    header += [f"element face {len(s.faces)}",
               "property list uchar int vertex_indices",
               "end_header"]

    cols_f = [s.vertices.astype(np.float32)]
    cols_f += [np.asarray(vertex_scalars[k], dtype=np.float32)[:, None] for k in vertex_scalars]
    cols_i = [np.asarray(vertex_ints[k], dtype=np.int32)[:, None] for k in vertex_ints]

    if binary:
        vdt = [(f"c{i}", "<f4") for i in range(3 + len(vertex_scalars))]
        vdt += [(f"d{i}", "<i4") for i in range(len(vertex_ints))]
        vrec = np.zeros(n, dtype=np.dtype(vdt))
        packed = np.concatenate(cols_f, axis=1)
        for i in range(packed.shape[1]):
            vrec[f"c{i}"] = packed[:, i]
        for i, col in enumerate(cols_i):
            vrec[f"d{i}"] = col[:, 0]
        frec = np.zeros(len(s.faces), dtype=np.dtype([("n", "u1"), ("v", "<i4", (3,))]))
        frec["n"] = 3
        frec["v"] = s.faces
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            fh.write(vrec.tobytes())
            fh.write(frec.tobytes())
    else:
        with open(path, "w") as fh:
            fh.write("\n".join(header) + "\n")
            packed = np.concatenate(cols_f + cols_i, axis=1) if cols_i else np.concatenate(cols_f, axis=1)
            ints = len(cols_i)
            for row in packed:
                floats = row[: len(row) - ints]
                tail = row[len(row) - ints:]
                parts = [f"{x:.6f}" for x in floats] + [str(int(x)) for x in tail]
                fh.write(" ".join(parts) + "\n")
            for f in s.faces:
                fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")
