import numpy as np
import pytest

from conftest import box_mask, iso_geometry
from kneecart.phantom import random_blob_mask
from kneecart.surface import (PatchBoundaryRestriction, Surface, SurfacePatch,
                              mesh_from_mask, patch_from_voxels,
                              restricted_dilate, surface_close, surface_dilate,
                              surface_erode, write_ply)
from kneecart.volume import BinaryMask, Geometry


def exposed_face_area(mask):
    """Oracle: sum the areas of voxel faces with no neighbour."""
    bits = mask.bits
    sx, sy, sz = mask.geometry.spacing
    face = {0: sy * sz, 1: sx * sz, 2: sx * sy}
    total = 0.0
    for axis in range(3):
        for sign in (1, -1):
            shifted = np.zeros_like(bits)
            src = [slice(None)] * 3
            dst = [slice(None)] * 3
            src[axis] = slice(1, None) if sign == 1 else slice(0, -1)
            dst[axis] = slice(0, -1) if sign == 1 else slice(1, None)
            shifted[tuple(dst)] = bits[tuple(src)]
            total += (bits & ~shifted).sum() * face[axis]
    return total


def test_single_voxel_cube():
    m = box_mask((3, 3, 3), (1, 1, 1), (2, 2, 2))
    s = mesh_from_mask(m)
    assert len(s.vertices) == 8
    assert len(s.faces) == 12
    assert np.isclose(s.area_mm2, 6.0)
    assert np.isclose(s.vertex_area.sum(), 6.0)
    # all corners at half-integer offsets around the voxel centre
    assert np.allclose(sorted(map(tuple, s.vertices)),
                       sorted((1 + dx, 1 + dy, 1 + dz)
                              for dx in (-.5, .5) for dy in (-.5, .5) for dz in (-.5, .5)))
    assert np.all(s.source_voxel == [1, 1, 1])


def test_anisotropic_voxel_area():
    bits = np.zeros((3, 3, 3), bool)
    bits[1, 1, 1] = True
    geom = Geometry((3, 3, 3), (0.7, 0.36, 0.36), (0, 0, 0), np.eye(3))
    s = mesh_from_mask(BinaryMask(bits, geom))
    expect = 2 * 0.36 * 0.36 + 4 * 0.7 * 0.36
    assert np.isclose(s.area_mm2, expect)
    assert np.isclose(expect, 1.2672)


def test_bar_area():
    m = box_mask((4, 3, 3), (1, 1, 1), (3, 2, 2))  # 2x1x1 voxels
    s = mesh_from_mask(m)
    assert np.isclose(s.area_mm2, 10.0)
    assert len(s.vertices) == 12


def test_outward_orientation():
    m = box_mask((3, 3, 3), (1, 1, 1), (2, 2, 2))
    s = mesh_from_mask(m)
    centre = np.array([1.0, 1.0, 1.0])
    p = s.vertices[s.faces]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    mid = p.mean(axis=1)
    assert np.all(np.einsum("ij,ij->i", n, mid - centre) > 0)


@pytest.mark.parametrize("seed", range(8))
def test_mesh_area_matches_exposed_faces(seed):
    m = random_blob_mask(seed=seed, spacing_mm=0.45)
    s = mesh_from_mask(m)
    assert np.isclose(s.area_mm2, exposed_face_area(m), rtol=1e-12)
    src = s.source_voxel
    assert m.bits[src[:, 0], src[:, 1], src[:, 2]].all()


def test_empty_mask_rejected(unit_geometry):
    with pytest.raises(ValueError, match="empty"):
        mesh_from_mask(BinaryMask(np.zeros((8, 8, 8), bool), unit_geometry))


def test_degenerate_face_rejected(unit_geometry):
    v = np.zeros((3, 3))
    with pytest.raises(ValueError, match="degenerate"):
        Surface(v, np.array([[0, 1, 1]]), np.zeros((3, 3), np.int32), unit_geometry)


def _flat_sheet(n=12):
    """Top face of a one-voxel-thick plate: a flat quad grid."""
    m = box_mask((n + 2, n + 2, 3), (1, 1, 1), (n + 1, n + 1, 2))
    s = mesh_from_mask(m)
    top = SurfacePatch(s, np.isclose(s.vertices[:, 2], 1.5))
    return s, top


def test_patch_set_operations():
    s, top = _flat_sheet()
    left = SurfacePatch(s, top.members & (s.vertices[:, 0] < 6))
    right = top.difference(left)
    assert len(left.union(right)) == len(top)
    assert len(left.intersection(right)) == 0
    assert np.isclose(left.area_mm2 + right.area_mm2, top.area_mm2)
    other = mesh_from_mask(box_mask((4, 4, 4), (1, 1, 1), (3, 3, 3)))
    with pytest.raises(ValueError, match="different surfaces"):
        left.union(SurfacePatch(other, np.ones(len(other), bool)))


def test_patch_area_additive_full_cover(unit_geometry):
    m = random_blob_mask(seed=3)
    s = mesh_from_mask(m)
    half = SurfacePatch(s, s.vertices[:, 1] < np.median(s.vertices[:, 1]))
    rest = SurfacePatch(s, ~half.members)
    assert np.isclose(half.area_mm2 + rest.area_mm2, s.area_mm2, rtol=1e-12)


def test_patch_from_voxels_direct_and_proximity():
    m = box_mask((8, 8, 8), (2, 2, 2), (6, 6, 6))
    s = mesh_from_mask(m)
    sub_bits = np.zeros((8, 8, 8), bool)
    sub_bits[2:6, 2:6, 2] = True  # bottom layer of the box
    sub = BinaryMask(sub_bits, m.geometry)
    p = patch_from_voxels(s, sub)
    # must contain the entire bottom facet
    assert np.all(p.members[np.isclose(s.vertices[:, 2], 1.5)])
    # and nothing farther than one voxel extent from a set voxel
    frac = m.geometry.world_to_voxel(s.vertices[p.members])
    vox = np.argwhere(sub_bits)
    d = np.abs(frac[:, None, :] - vox[None, :, :]).max(axis=2).min(axis=1)
    assert d.max() <= 1.0 + 1e-9


def test_patch_from_voxels_cross_mask():
    # cartilage voxels mapped onto the bone mesh: picks the bone top face
    dims = (10, 10, 8)
    bone = box_mask(dims, (1, 1, 1), (9, 9, 4))
    cart_bits = np.zeros(dims, bool)
    cart_bits[3:7, 3:7, 4:6] = True
    cart = BinaryMask(cart_bits, bone.geometry)
    bs = mesh_from_mask(bone)
    p = patch_from_voxels(bs, cart)
    assert len(p) > 0
    z = bs.vertices[p.members][:, 2]
    assert np.allclose(z, 3.5)  # only vertices on the bone top plane

    with pytest.raises(ValueError, match="different grids"):
        patch_from_voxels(bs, box_mask(dims, (1, 1, 1), (2, 2, 2), spacing=0.4))


def test_dilate_erode_are_monotone():
    s, top = _flat_sheet()
    seed_id = top.vertex_ids[len(top) // 2]
    seed = np.zeros(len(s), bool)
    seed[seed_id] = True
    p = SurfacePatch(s, seed)
    d1 = surface_dilate(p, top, 1)
    d2 = surface_dilate(p, top, 2)
    assert np.all(d1.members[p.members])
    assert np.all(d2.members[d1.members])
    assert not np.any(d1.members & ~top.members)  # domain respected

    e = surface_erode(d2, 1)
    assert np.all(d2.members[e.members])


def test_erode_peels_one_ring():
    s, top = _flat_sheet(8)
    e = surface_erode(top, 1)
    # the sheet border vertices touch the plate sides, so one ring peels
    assert 0 < len(e) < len(top)
    border = top.members & s.neighbours_of(~top.members)
    assert not np.any(e.members & border)


def test_close_fills_punched_hole():
    s, top = _flat_sheet(14)
    ids = top.vertex_ids
    pts = s.vertices[ids]
    centre = pts.mean(axis=0)
    hole = np.linalg.norm(pts[:, :2] - centre[:2], axis=1) < 1.6
    punched = SurfacePatch(s, top.members.copy())
    punched.members[ids[hole]] = False
    assert int(hole.sum()) > 0

    closed = surface_close(punched, top, 4, 4)
    assert np.all(closed.members[ids[hole]])


def test_restricted_dilate_respects_ring():
    s, top = _flat_sheet(14)
    ids = top.vertex_ids
    pts = s.vertices[ids]
    centre = pts.mean(axis=0)
    r = np.linalg.norm(pts[:, :2] - centre[:2], axis=1)
    ring = (r >= 2.0) & (r < 3.5)  # closed annulus two rings thick
    forbidden = np.zeros(len(s), bool)
    forbidden[ids[ring]] = True

    seed = np.zeros(len(s), bool)
    seed[ids[np.argmin(r)]] = True
    grown = restricted_dilate(SurfacePatch(s, seed), PatchBoundaryRestriction(forbidden),
                              SurfacePatch(s, top.members))
    assert not np.any(grown.members & forbidden)
    outside = top.members.copy()
    outside[ids[r < 3.5]] = False
    assert not np.any(grown.members & outside)

    # members marked forbidden are never evicted
    seed2 = forbidden.copy()
    grown2 = restricted_dilate(SurfacePatch(s, seed2), PatchBoundaryRestriction(forbidden))
    assert np.all(grown2.members[forbidden])


def _read_ply_ascii(path):
    lines = path.read_text().splitlines()
    end = lines.index("end_header")
    nv = int(next(l for l in lines if l.startswith("element vertex")).split()[-1])
    nf = int(next(l for l in lines if l.startswith("element face")).split()[-1])
    vals = [list(map(float, l.split())) for l in lines[end + 1:end + 1 + nv]]
    faces = [list(map(int, l.split()))[1:] for l in lines[end + 1 + nv:end + 1 + nv + nf]]
    return np.array(vals), np.array(faces)


def test_write_ply_ascii_round_trip(tmp_path):
    m = box_mask((3, 3, 3), (1, 1, 1), (2, 2, 2))
    s = mesh_from_mask(m)
    th = np.linspace(0, 1, len(s))
    path = tmp_path / "m.ply"
    write_ply(s, path, binary=False, vertex_scalars={"thickness": th},
              comments=("unit test",))
    vals, faces = _read_ply_ascii(path)
    assert vals.shape == (8, 4)
    assert np.allclose(vals[:, :3], s.vertices, atol=1e-5)
    assert np.allclose(vals[:, 3], th, atol=1e-5)
    assert np.array_equal(faces, s.faces)


def test_write_ply_binary_round_trip(tmp_path):
    m = box_mask((3, 3, 3), (1, 1, 1), (2, 2, 2))
    s = mesh_from_mask(m)
    path = tmp_path / "m.ply"
    write_ply(s, path, binary=True, vertex_ints={"region": np.arange(len(s))})
    raw = path.read_bytes()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    vrec = np.frombuffer(raw, dtype=np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                              ("region", "<i4")]), count=len(s), offset=end)
    assert np.allclose(np.stack([vrec["x"], vrec["y"], vrec["z"]], axis=1),
                       s.vertices, atol=1e-5)
    assert np.array_equal(vrec["region"], np.arange(len(s)))
    frec = np.frombuffer(raw, dtype=np.dtype([("n", "u1"), ("v", "<i4", (3,))]),
                         count=len(s.faces), offset=end + vrec.nbytes)
    assert np.all(frec["n"] == 3)
    assert np.array_equal(frec["v"], s.faces)


def test_write_ply_length_mismatch(tmp_path):
    s = mesh_from_mask(box_mask((3, 3, 3), (1, 1, 1), (2, 2, 2)))
    with pytest.raises(ValueError, match="property"):
        write_ply(s, tmp_path / "x.ply", vertex_scalars={"t": np.zeros(3)})
