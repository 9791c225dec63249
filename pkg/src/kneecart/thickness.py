"""Cartilage thickness on the bone-interface surface.

Per-vertex normals come from an SVD plane fit over the k nearest patch
vertices, get oriented into the cartilage, are smoothed by neighbourhood
averaging, and thickness is the ray distance from each interface vertex
along its normal to the articular-side surface.  A nearest-vertex
distance (3D nearest neighbour) is kept as the comparison baseline; it
is known to underestimate near patch edges.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .surface import SurfacePatch
from .volume import BinaryMask

log = logging.getLogger(__name__)

DEFAULT_K = 16
DEFAULT_SMOOTH_ITERATIONS = 3
DEFAULT_MAX_RAY_MM = 15.0
CENTROID_BALL_DIAGONALS = 5.0
_DEGENERATE_RATIO = 1e-9


@dataclass
class NormalField:
    """Unit normals for a patch, one row per member vertex (in ascending
    vertex-id order)."""

    patch: SurfacePatch
    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.shape != (len(self.patch), 3):
            raise ValueError(f"expected {(len(self.patch), 3)} normals, got {v.shape}")
        self.vectors = v


@dataclass
class ThicknessMap:
    """Thickness in mm per patch vertex; NaN marks rays with no hit."""

    patch: SurfacePatch
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (len(self.patch),):
            raise ValueError(f"expected {len(self.patch)} values, got {v.shape}")
        self.values = v

    @property
    def defined(self) -> np.ndarray:
        return np.isfinite(self.values)

    @property
    def finite_values(self) -> np.ndarray:
        return self.values[self.defined]


def _patch_knn(points: np.ndarray, k: int) -> np.ndarray:
    tree = cKDTree(points)
    _, idx = tree.query(points, k=k)
    return idx


def _patch_neighbourhoods(points: np.ndarray, k: int) -> list:
    """Each vertex's k nearest patch vertices plus every vertex tied
    with the k-th distance.  The tie closure makes the neighbourhood a
    geometric ball, so it does not depend on vertex enumeration order
    (lattice meshes tie constantly)."""
    tree = cKDTree(points)
    d, _ = tree.query(points, k=k)
    return tree.query_ball_point(points, d[:, -1] + 1e-9)


def estimate_normals_svd(patch: SurfacePatch, k: int = DEFAULT_K) -> NormalField:
    """Plane-fit normals: the right-singular vector of the smallest
    singular value over each vertex's nearest patch vertices.

    Signs are canonical but arbitrary; follow with
    :func:`reorient_normals`.  Vertices whose neighbourhood is rank
    deficient (collinear) fall back to the average of their neighbours'
    normals.
    """
    if k < 4:
        raise ValueError(f"k must be >= 4, got {k}")
    pts = patch.positions
    if len(pts) < k:
        raise ValueError(f"patch has {len(pts)} vertices, fewer than k={k}")

    balls = _patch_neighbourhoods(pts, k)
    normals = np.zeros((len(pts), 3))
    sv = np.zeros((len(pts), 2))
    by_size: dict[int, list[int]] = {}
    for v, nb in enumerate(balls):
        by_size.setdefault(len(nb), []).append(v)
    for verts in by_size.values():
        nbhd = pts[np.array([balls[v] for v in verts])]
        centred = nbhd - nbhd.mean(axis=1, keepdims=True)
        _, svals, vt = np.linalg.svd(centred, full_matrices=False)
        normals[verts] = vt[:, 2, :]
        sv[verts] = svals[:, :2]

    # deterministic sign: largest-magnitude component made positive
    lead = np.argmax(np.abs(normals), axis=1)
    sign = np.sign(normals[np.arange(len(normals)), lead])
    sign[sign == 0] = 1.0
    normals *= sign[:, None]

    degenerate = sv[:, 1] <= _DEGENERATE_RATIO * np.maximum(sv[:, 0], 1e-300)
    if degenerate.any():
        log.warning("%d vertices had rank-deficient neighbourhoods; averaging around them",
                    int(degenerate.sum()))
        for v in np.nonzero(degenerate)[0]:
            ring = [u for u in balls[v] if not degenerate[u]]
            if ring:
                m = normals[ring].sum(axis=0)
                nrm = np.linalg.norm(m)
                if nrm > 0:
                    normals[v] = m / nrm

    normals /= np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-300)
    return NormalField(patch, normals)


def reorient_normals(field: NormalField, cart: BinaryMask,
                     ball_diagonals: float = CENTROID_BALL_DIAGONALS) -> NormalField:
    """Flip normals to point into the cartilage.

    Each normal is compared against the offset to the local cartilage
    centroid (ball radius ``ball_diagonals`` voxel diagonals); vertices
    where that test is ambiguous take the majority orientation of their
    k-nearest neighbours.  Already-consistent fields pass through
    unchanged.
    """
    pts = field.patch.positions
    geom = cart.geometry
    diag = float(np.linalg.norm(geom.spacing))
    radius = ball_diagonals * diag

    vox = np.argwhere(cart.bits)
    if len(vox) == 0:
        raise ValueError("cartilage mask is empty; cannot orient normals")
    centres = geom.voxel_to_world(vox)
    tree = cKDTree(centres)
    hits = tree.query_ball_point(pts, r=radius, workers=-1)

    vectors = field.vectors.copy()
    dots = np.zeros(len(pts))
    for i, hit in enumerate(hits):
        if not hit:
            continue
        offset = centres[hit].mean(axis=0) - pts[i]
        dots[i] = float(vectors[i] @ offset)

    scale = diag * 1e-6
    decided = np.abs(dots) > scale
    vectors[decided & (dots < 0)] *= -1.0

    undecided = ~decided
    if undecided.any():
        idx = _patch_knn(pts, min(DEFAULT_K, len(pts)))
        for _ in range(10):
            changed = False
            for v in np.nonzero(undecided)[0]:
                ring = idx[v][decided[idx[v]]]
                if len(ring) == 0:
                    continue
                vote = float(np.sign(vectors[ring] @ vectors[v]).sum())
                if vote < 0:
                    vectors[v] *= -1.0
                decided[v] = True
                undecided[v] = False
                changed = True
            if not changed or not undecided.any():
                break
        if undecided.any():
            warnings.warn(f"{int(undecided.sum())} normals left unoriented (no local cartilage)")

    return NormalField(field.patch, vectors)


def smooth_normals(field: NormalField, iterations: int = DEFAULT_SMOOTH_ITERATIONS) -> NormalField:
    """Average each normal with its patch neighbours and renormalize,
    ``iterations`` times.  Zero averages keep the previous direction."""
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    vectors = field.vectors.copy()
    if iterations == 0 or len(vectors) == 0:
        return NormalField(field.patch, vectors)

    patch = field.patch
    parent = patch.parent
    ids = patch.vertex_ids
    if len(parent.faces):
        adj = parent.vertex_adjacency[ids][:, ids].tocsr()
        for _ in range(iterations):
            summed = vectors + adj @ vectors
            norms = np.linalg.norm(summed, axis=1, keepdims=True)
            keep = norms[:, 0] <= 1e-12
            summed[keep] = vectors[keep]
            norms[keep] = 1.0
            vectors = summed / norms
    else:
        idx = _patch_knn(patch.positions, min(DEFAULT_K, len(vectors)))
        for _ in range(iterations):
            summed = vectors + vectors[idx[:, 1:]].sum(axis=1)
            norms = np.linalg.norm(summed, axis=1, keepdims=True)
            keep = norms[:, 0] <= 1e-12
            summed[keep] = vectors[keep]
            norms[keep] = 1.0
            vectors = summed / norms
    return NormalField(field.patch, vectors)


# --- ray-cast measurement ----------------------------------------------------


def _ray_triangle_block(origins, dirs, tri, max_ray):
    """Smallest non-negative hit distance per ray against a triangle
    block (Moeller-Trumbore, both faces).  Returns inf where no hit."""
    eps = 1e-12
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    e1 = v1 - v0
    e2 = v2 - v0

    pvec = np.cross(dirs[:, None, :], e2[None, :, :])
    det = np.einsum("rtk,tk->rt", pvec, e1)
    ok = np.abs(det) > eps
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = origins[:, None, :] - v0[None, :, :]
    u = np.einsum("rtk,rtk->rt", tvec, pvec) * inv
    ok &= (u >= -1e-9) & (u <= 1 + 1e-9)
    qvec = np.cross(tvec, e1[None, :, :])
    v = np.einsum("rk,rtk->rt", dirs, qvec) * inv
    ok &= (v >= -1e-9) & (u + v <= 1 + 1e-9)
    t = np.einsum("tk,rtk->rt", e2, qvec) * inv
    ok &= (t >= -1e-9) & (t <= max_ray)
    t = np.where(ok, np.maximum(t, 0.0), np.inf)
    return t.min(axis=1)


def measure_thickness(field: NormalField, outer: SurfacePatch,
                      max_ray_mm: float = DEFAULT_MAX_RAY_MM) -> ThicknessMap:
    """Cast a ray from each patch vertex along its normal and take the
    nearest intersection with the outer surface (triangles induced by
    the outer patch).  Rays that miss within ``max_ray_mm`` get NaN."""
    if max_ray_mm <= 0:
        raise ValueError("max_ray_mm must be positive")
    origins = field.patch.positions
    dirs = field.vectors
    faces = outer.induced_faces()
    values = np.full(len(origins), np.nan)
    if len(faces) == 0:
        warnings.warn("outer patch induces no faces; all thickness values are undefined")
        return ThicknessMap(field.patch, values)
    tri = outer.parent.vertices[faces]

    ray_block = 256
    tri_block = 4096
    for r0 in range(0, len(origins), ray_block):
        r1 = min(r0 + ray_block, len(origins))
        best = np.full(r1 - r0, np.inf)
        for t0 in range(0, len(tri), tri_block):
            t1 = min(t0 + tri_block, len(tri))
            cand = _ray_triangle_block(origins[r0:r1], dirs[r0:r1], tri[t0:t1], max_ray_mm)
            best = np.minimum(best, cand)
        hit = np.isfinite(best)
        values[r0:r1][hit] = best[hit]
    return ThicknessMap(field.patch, values)


def thickness_3dnn(inner: SurfacePatch, outer: SurfacePatch) -> ThicknessMap:
    """Baseline: Euclidean distance to the nearest outer-surface vertex."""
    if len(outer) == 0:
        raise ValueError("outer patch is empty")
    tree = cKDTree(outer.positions)
    d, _ = tree.query(inner.positions, k=1)
    return ThicknessMap(inner, np.asarray(d, dtype=np.float64))
