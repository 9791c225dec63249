import gzip
import struct

import numpy as np
import pytest

from kneecart.nifti import FormatError, read_nifti, write_nifti

# header byte offsets used to craft/patch files by hand
OFF_SIZEOF = 0
OFF_DIM = 40
OFF_DATATYPE = 70
OFF_BITPIX = 72
OFF_PIXDIM = 76
OFF_VOX_OFFSET = 108
OFF_SCL_SLOPE = 112
OFF_SCL_INTER = 116
OFF_SFORM_CODE = 254
OFF_SROW_X = 280
OFF_MAGIC = 344


def _affine(spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    a = np.eye(4)
    a[:3, :3] = np.diag(spacing)
    a[:3, 3] = origin
    return a


@pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.int32, np.float32])
def test_round_trip_dtypes(tmp_path, dtype):
    rng = np.random.default_rng(0)
    data = (rng.integers(0, 100, size=(5, 4, 3))).astype(dtype)
    path = tmp_path / "v.nii"
    write_nifti(path, data, _affine((0.5, 0.7, 1.1), (3.0, -2.0, 1.0)), descrip="hello")
    back, affine, descrip = read_nifti(path)
    assert back.dtype == dtype
    assert np.array_equal(back, data)
    assert descrip == "hello"
    assert np.allclose(affine, _affine((0.5, 0.7, 1.1), (3.0, -2.0, 1.0)), atol=1e-6)


def test_gzip_round_trip_and_determinism(tmp_path):
    data = np.arange(24, dtype=np.int16).reshape(2, 3, 4)
    p1 = tmp_path / "a.nii.gz"
    p2 = tmp_path / "b.nii.gz"
    write_nifti(p1, data, _affine())
    write_nifti(p2, data, _affine())
    assert p1.read_bytes() == p2.read_bytes()
    back, _, _ = read_nifti(p1)
    assert np.array_equal(back, data)


def test_fortran_order_on_disk(tmp_path):
    # first index must be fastest in the file
    data = np.arange(8, dtype=np.uint8).reshape(2, 2, 2)
    path = tmp_path / "f.nii"
    write_nifti(path, data, _affine())
    raw = path.read_bytes()
    assert raw[352:] == data.tobytes(order="F")


def test_vector_field_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    field = rng.standard_normal((4, 3, 2, 3)).astype(np.float32)
    path = tmp_path / "field.nii"
    write_nifti(path, field, _affine())
    back, _, _ = read_nifti(path)
    assert back.shape == (4, 3, 2, 3)
    assert np.array_equal(back, field)


def test_big_endian_file_is_byteswapped(tmp_path):
    """Hand-built big-endian file: the reader must detect the order from
    sizeof_hdr and return native-order data."""
    shape = (3, 2, 2)
    data = np.arange(12, dtype=">i2").reshape(shape)
    hdr = bytearray(348)
    struct.pack_into(">i", hdr, OFF_SIZEOF, 348)
    struct.pack_into(">8h", hdr, OFF_DIM, 3, *shape, 1, 1, 1, 1)
    struct.pack_into(">h", hdr, OFF_DATATYPE, 4)
    struct.pack_into(">h", hdr, OFF_BITPIX, 16)
    struct.pack_into(">8f", hdr, OFF_PIXDIM, 1.0, 1.0, 1.0, 1.0, 0, 0, 0, 0)
    struct.pack_into(">f", hdr, OFF_VOX_OFFSET, 352.0)
    struct.pack_into(">h", hdr, OFF_SFORM_CODE, 1)
    struct.pack_into(">4f", hdr, OFF_SROW_X, 1.0, 0.0, 0.0, 0.0)
    struct.pack_into(">4f", hdr, OFF_SROW_X + 16, 0.0, 1.0, 0.0, 0.0)
    struct.pack_into(">4f", hdr, OFF_SROW_X + 32, 0.0, 0.0, 1.0, 0.0)
    hdr[OFF_MAGIC:OFF_MAGIC + 4] = b"n+1\x00"
    path = tmp_path / "be.nii"
    path.write_bytes(bytes(hdr) + b"\x00" * 4 + data.tobytes(order="F"))

    back, affine, _ = read_nifti(path)
    assert back.dtype.byteorder in ("=", "<", "|")
    assert np.array_equal(back, np.arange(12).reshape(shape))
    assert np.allclose(affine, np.eye(4))


def _patch_written(tmp_path, data, mutate):
    path = tmp_path / "m.nii"
    write_nifti(path, data, _affine())
    raw = bytearray(path.read_bytes())
    mutate(raw)
    path.write_bytes(bytes(raw))
    return path


def test_scl_slope_rescales_float(tmp_path):
    data = np.linspace(0, 1, 12, dtype=np.float32).reshape(3, 2, 2)

    def mutate(raw):
        struct.pack_into("<f", raw, OFF_SCL_SLOPE, 2.0)
        struct.pack_into("<f", raw, OFF_SCL_INTER, -1.0)

    path = _patch_written(tmp_path, data, mutate)
    back, _, _ = read_nifti(path)
    assert np.allclose(back, data * 2.0 - 1.0, atol=1e-6)


def test_scl_slope_nan_is_ignored(tmp_path):
    data = np.ones((2, 2, 2), dtype=np.float32)

    def mutate(raw):
        struct.pack_into("<f", raw, OFF_SCL_SLOPE, np.nan)

    back, _, _ = read_nifti(_patch_written(tmp_path, data, mutate))
    assert np.array_equal(back, data)


def test_scl_slope_on_integer_data_rejected(tmp_path):
    data = np.ones((2, 2, 2), dtype=np.uint8)

    def mutate(raw):
        struct.pack_into("<f", raw, OFF_SCL_SLOPE, 3.0)

    with pytest.raises(FormatError, match="rescaling"):
        read_nifti(_patch_written(tmp_path, data, mutate))


def test_five_dim_singleton_field(tmp_path):
    # dim = (5, x, y, z, 1, 3): same payload as 4D, header says 5D
    field = np.arange(2 * 2 * 2 * 3, dtype=np.float32).reshape(2, 2, 2, 3)

    def mutate(raw):
        struct.pack_into("<8h", raw, OFF_DIM, 5, 2, 2, 2, 1, 3, 1, 1)

    path = _patch_written(tmp_path, field, mutate)
    back, _, _ = read_nifti(path)
    assert back.shape == (2, 2, 2, 1, 3)
    assert np.array_equal(back.reshape(2, 2, 2, 3), field)


def test_bad_magic_rejected(tmp_path):
    def mutate(raw):
        raw[OFF_MAGIC:OFF_MAGIC + 4] = b"ni1\x00"

    with pytest.raises(FormatError, match="magic"):
        read_nifti(_patch_written(tmp_path, np.zeros((2, 2, 2), np.uint8), mutate))


def test_bad_sizeof_hdr_rejected(tmp_path):
    def mutate(raw):
        struct.pack_into("<i", raw, OFF_SIZEOF, 347)

    with pytest.raises(FormatError, match="sizeof_hdr"):
        read_nifti(_patch_written(tmp_path, np.zeros((2, 2, 2), np.uint8), mutate))


def test_unsupported_datatype_rejected(tmp_path):
    def mutate(raw):
        struct.pack_into("<h", raw, OFF_DATATYPE, 64)  # float64

    with pytest.raises(FormatError, match="datatype"):
        read_nifti(_patch_written(tmp_path, np.zeros((2, 2, 2), np.uint8), mutate))


def test_truncated_data_rejected(tmp_path):
    path = tmp_path / "t.nii"
    write_nifti(path, np.zeros((4, 4, 4), np.int32), _affine())
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(FormatError, match="truncated"):
        read_nifti(path)


def test_short_file_rejected(tmp_path):
    path = tmp_path / "s.nii"
    path.write_bytes(b"\x00" * 100)
    with pytest.raises(FormatError, match="shorter"):
        read_nifti(path)


def test_garbage_gzip_payload_rejected(tmp_path):
    path = tmp_path / "g.nii.gz"
    path.write_bytes(gzip.compress(b"not a nifti at all"))
    with pytest.raises(FormatError):
        read_nifti(path)


def test_write_rejects_bad_inputs(tmp_path):
    with pytest.raises(FormatError, match="dtype"):
        write_nifti(tmp_path / "x.nii", np.zeros((2, 2, 2), np.float64), _affine())
    with pytest.raises(FormatError, match="trailing axis"):
        write_nifti(tmp_path / "x.nii", np.zeros((2, 2, 2, 4), np.float32), _affine())
    with pytest.raises(FormatError, match="ndim"):
        write_nifti(tmp_path / "x.nii", np.zeros((2, 2), np.float32), _affine())
    with pytest.raises(FormatError, match="4x4"):
        write_nifti(tmp_path / "x.nii", np.zeros((2, 2, 2), np.uint8), np.eye(3))


def test_qform_fallback(tmp_path):
    # sform 0, qform 1 with identity quaternion: offset-only affine
    data = np.zeros((2, 2, 2), np.uint8)

    def mutate(raw):
        struct.pack_into("<h", raw, OFF_SFORM_CODE, 0)
        struct.pack_into("<h", raw, OFF_SFORM_CODE - 2, 1)  # qform_code
        struct.pack_into("<f", raw, 256, 0.0)  # quatern_b
        struct.pack_into("<f", raw, 260, 0.0)  # quatern_c
        struct.pack_into("<f", raw, 264, 0.0)  # quatern_d
        struct.pack_into("<f", raw, 268, 5.0)  # qoffset_x
        struct.pack_into("<f", raw, 272, -3.0)
        struct.pack_into("<f", raw, 276, 2.0)

    _, affine, _ = read_nifti(_patch_written(tmp_path, data, mutate))
    expect = np.eye(4)
    expect[:3, 3] = [5.0, -3.0, 2.0]
    assert np.allclose(affine, expect, atol=1e-6)
