import gzip
import struct

import nibabel as nib
import numpy as np
import pytest
from hypothesis import given, strategies as st

from panceval.nifti import (
    DT_INT16,
    DT_INT32,
    DT_UINT8,
    DT_UINT16,
    NiftiError,
    encode,
    read_label_volume,
    write_label_volume,
)
from panceval.volume import LabelVolume

NP_TYPES = {"uint8": np.uint8, "int16": np.int16, "uint16": np.uint16, "int32": np.int32}


def _nib_write(path, arr, affine, dtype, qform_code=1, sform_code=1):
    img = nib.Nifti1Image(arr.astype(dtype), affine)
    img.header.set_data_dtype(dtype)
    img.set_qform(affine, qform_code)
    img.set_sform(affine, sform_code)
    nib.save(img, str(path))


def test_minimal_round_trip(tmp_path):
    arr = np.arange(64, dtype=np.uint8).reshape(4, 4, 4)
    vol = LabelVolume(arr, (1.0, 2.0, 0.5), (-3.0, 4.0, 10.0))
    write_label_volume(vol, tmp_path / "v.nii")
    back, hdr = read_label_volume(tmp_path / "v.nii")
    assert back == vol
    assert hdr.datatype == DT_UINT8
    assert (tmp_path / "v.nii").stat().st_size == 352 + 64


def test_payload_layout_is_x_fastest(tmp_path):
    arr = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    vol = LabelVolume(arr)
    raw = encode(vol)
    assert raw[352:] == arr.tobytes(order="F")


@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
@pytest.mark.parametrize("dtype", ["uint8", "int16", "uint16", "int32"])
def test_reads_independent_writer(tmp_path, suffix, dtype, rng):
    arr = rng.integers(0, 45, size=(5, 6, 7))
    affine = np.diag([0.8, 1.2, 2.5, 1.0])
    affine[:3, 3] = [10.0, -20.0, 5.0]
    path = tmp_path / f"img{suffix}"
    _nib_write(path, arr, affine, NP_TYPES[dtype])
    vol, _ = read_label_volume(path)
    assert np.array_equal(vol.array, arr)
    assert np.allclose(vol.spacing, (0.8, 1.2, 2.5))
    assert np.allclose(vol.origin, (10.0, -20.0, 5.0))


def test_gzip_and_plain_agree(tmp_path, rng):
    arr = rng.integers(0, 45, size=(6, 5, 4))
    affine = np.diag([1.5, 1.5, 3.0, 1.0])
    _nib_write(tmp_path / "a.nii", arr, affine, np.uint8)
    _nib_write(tmp_path / "a.nii.gz", arr, affine, np.uint8)
    plain, _ = read_label_volume(tmp_path / "a.nii")
    packed, _ = read_label_volume(tmp_path / "a.nii.gz")
    assert plain == packed


def test_written_files_read_by_nibabel(tmp_path, rng):
    arr = rng.integers(0, 45, size=(6, 5, 4)).astype(np.uint8)
    vol = LabelVolume(arr, (0.75, 1.0, 2.0), (1.0, 2.0, 3.0))
    write_label_volume(vol, tmp_path / "x.nii.gz")
    img = nib.load(str(tmp_path / "x.nii.gz"))
    assert np.array_equal(np.asarray(img.dataobj), arr)
    assert np.allclose(img.affine[:3, 3], (1.0, 2.0, 3.0))
    assert np.allclose(np.diag(img.affine)[:3], (0.75, 1.0, 2.0))


def test_flip_and_permutation_reduced_to_axis_aligned(tmp_path, rng):
    arr = rng.integers(0, 20, size=(3, 4, 5))
    # voxel axis 0 -> world y (negative), axis 1 -> world z, axis 2 -> world x
    affine = np.array(
        [
            [0.0, 0.0, 2.0, 5.0],
            [-1.5, 0.0, 0.0, 7.0],
            [0.0, 3.0, 0.0, -1.0],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    _nib_write(tmp_path / "o.nii", arr, affine, np.int16)
    vol, _ = read_label_volume(tmp_path / "o.nii")
    assert vol.dims == (5, 3, 4)
    assert np.allclose(vol.spacing, (2.0, 1.5, 3.0))
    # every voxel must land at the same world position it had in the file
    for ijk in np.ndindex(*arr.shape):
        world = affine[:3, :3] @ np.array(ijk) + affine[:3, 3]
        idx = np.rint((world - np.array(vol.origin)) / np.array(vol.spacing)).astype(int)
        assert vol.array[tuple(idx)] == arr[ijk]


def test_qform_only_orientation(tmp_path, rng):
    arr = rng.integers(0, 20, size=(3, 4, 5))
    affine = np.diag([-2.0, 1.0, 1.5, 1.0])
    affine[:3, 3] = [4.0, 0.0, 0.0]
    _nib_write(tmp_path / "q.nii", arr, affine, np.uint8, qform_code=1, sform_code=0)
    vol, hdr = read_label_volume(tmp_path / "q.nii")
    assert hdr.sform_code == 0
    assert np.array_equal(vol.array, arr[::-1])
    assert np.allclose(vol.origin, (0.0, 0.0, 0.0))


def test_sform_wins_over_qform(tmp_path, rng):
    arr = rng.integers(0, 20, size=(3, 4, 5))
    img = nib.Nifti1Image(arr.astype(np.uint8), np.eye(4))
    img.set_qform(np.diag([1.0, 1.0, 1.0, 1.0]), 1)
    s = np.diag([-1.0, 1.0, 1.0, 1.0])
    img.set_sform(s, 2)
    nib.save(img, str(tmp_path / "s.nii"))
    vol, _ = read_label_volume(tmp_path / "s.nii")
    assert np.array_equal(vol.array, arr[::-1])


def test_oblique_rejected(tmp_path):
    c, s = np.cos(0.3), np.sin(0.3)
    affine = np.array([[c, -s, 0, 0], [s, c, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1.0]])
    _nib_write(tmp_path / "ob.nii", np.zeros((3, 3, 3)), affine, np.uint8)
    with pytest.raises(NiftiError, match="oblique"):
        read_label_volume(tmp_path / "ob.nii")


def _patch(raw: bytes, fmt: str, offset: int, *values) -> bytes:
    buf = bytearray(raw)
    struct.pack_into("<" + fmt, buf, offset, *values)
    return bytes(buf)


def test_non_identity_scaling_rejected(tmp_path):
    raw = _patch(encode(LabelVolume(np.zeros((4, 4, 4), np.uint8))), "f", 112, 2.0)
    (tmp_path / "s.nii").write_bytes(raw)
    with pytest.raises(NiftiError, match="non-identity scaling"):
        read_label_volume(tmp_path / "s.nii")


def test_negative_label_rejected(tmp_path):
    _nib_write(tmp_path / "n.nii", np.full((2, 2, 2), -3), np.eye(4), np.int16)
    with pytest.raises(NiftiError, match="negative"):
        read_label_volume(tmp_path / "n.nii")


def test_unsupported_datatype_rejected(tmp_path):
    _nib_write(tmp_path / "f.nii", np.zeros((2, 2, 2)), np.eye(4), np.float32)
    with pytest.raises(NiftiError, match="unsupported datatype"):
        read_label_volume(tmp_path / "f.nii")


def test_bad_magic_and_short_file(tmp_path):
    raw = bytearray(encode(LabelVolume(np.zeros((2, 2, 2), np.uint8))))
    raw[344:348] = b"xxxx"
    (tmp_path / "m.nii").write_bytes(bytes(raw))
    with pytest.raises(NiftiError, match="magic"):
        read_label_volume(tmp_path / "m.nii")
    (tmp_path / "short.nii").write_bytes(b"\x00" * 100)
    with pytest.raises(NiftiError):
        read_label_volume(tmp_path / "short.nii")


def test_extra_dims(tmp_path):
    raw = encode(LabelVolume(np.zeros((2, 2, 2), np.uint8)))
    ok = _patch(raw, "8h", 40, 5, 2, 2, 2, 1, 1, 1, 1)
    (tmp_path / "ok.nii").write_bytes(ok)
    assert read_label_volume(tmp_path / "ok.nii")[0].dims == (2, 2, 2)
    bad = _patch(raw, "8h", 40, 4, 2, 2, 1, 2, 1, 1, 1)
    (tmp_path / "bad.nii").write_bytes(bad)
    with pytest.raises(NiftiError, match="3D"):
        read_label_volume(tmp_path / "bad.nii")


def test_big_endian_file(tmp_path, rng):
    arr = rng.integers(0, 300, size=(3, 4, 2))
    hdr = nib.Nifti1Header(endianness=">")
    hdr.set_data_dtype(np.int16)
    img = nib.Nifti1Image(arr.astype(np.int16), np.eye(4), header=hdr)
    nib.save(img, str(tmp_path / "be.nii"))
    assert nib.load(str(tmp_path / "be.nii")).header.endianness == ">"
    vol, hdr = read_label_volume(tmp_path / "be.nii")
    assert hdr.endian == ">"
    assert np.array_equal(vol.array, arr)


def test_default_datatype_and_overflow(tmp_path):
    small = LabelVolume(np.full((2, 2, 2), 44, np.uint8))
    write_label_volume(small, tmp_path / "a.nii")
    assert read_label_volume(tmp_path / "a.nii")[1].datatype == DT_UINT8
    big = LabelVolume(np.full((2, 2, 2), 300, np.uint16))
    write_label_volume(big, tmp_path / "b.nii")
    assert read_label_volume(tmp_path / "b.nii")[1].datatype == DT_UINT16
    with pytest.raises(NiftiError, match="code overflow"):
        write_label_volume(big, tmp_path / "c.nii", "uint8")
    with pytest.raises(NiftiError, match="code overflow"):
        write_label_volume(LabelVolume(np.full((1, 1, 1), 40000, np.uint16)), tmp_path / "d.nii", DT_INT16)


def test_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        write_label_volume(LabelVolume(np.zeros((1, 1, 1), np.uint8)), tmp_path / "missing" / "x.nii")


def test_corrupt_gzip(tmp_path):
    blob = gzip.compress(encode(LabelVolume(np.zeros((4, 4, 4), np.uint8))))
    (tmp_path / "c.nii.gz").write_bytes(blob[:40])
    with pytest.raises(NiftiError):
        read_label_volume(tmp_path / "c.nii.gz")


def test_repeat_writes_byte_identical(tmp_path, rng):
    vol = LabelVolume(rng.integers(0, 45, size=(5, 5, 5)).astype(np.uint8))
    write_label_volume(vol, tmp_path / "1.nii.gz")
    write_label_volume(vol, tmp_path / "2.nii.gz")
    assert (tmp_path / "1.nii.gz").read_bytes() == (tmp_path / "2.nii.gz").read_bytes()
    a, _ = read_label_volume(tmp_path / "1.nii.gz")
    b, _ = read_label_volume(tmp_path / "1.nii.gz")
    assert a == b


# spacing/origin values exactly representable in float32 header fields
f32 = st.sampled_from([0.5, 0.625, 0.75, 1.0, 1.5, 2.0, 2.5, 3.0])
off = st.sampled_from([-100.5, -1.25, 0.0, 3.0, 42.75])


@given(
    dims=st.tuples(*[st.integers(1, 7)] * 3),
    spacing=st.tuples(f32, f32, f32),
    origin=st.tuples(off, off, off),
    dtype=st.sampled_from(["uint8", "int16", "uint16", "int32"]),
    gz=st.booleans(),
    seed=st.integers(0, 2**31),
)
def test_round_trip_property(tmp_path_factory, dims, spacing, origin, dtype, gz, seed):
    r = np.random.Generator(np.random.PCG64(seed))
    hi = {"uint8": 255, "int16": 32767, "uint16": 65535, "int32": 2**31 - 1}[dtype]
    arr = r.integers(0, hi, size=dims, endpoint=True)
    vol = LabelVolume(arr, spacing, origin)
    path = tmp_path_factory.mktemp("rt") / ("v.nii.gz" if gz else "v.nii")
    write_label_volume(vol, path, dtype)
    back, hdr = read_label_volume(path)
    assert back == vol
    assert hdr.datatype == {"uint8": DT_UINT8, "int16": DT_INT16, "uint16": DT_UINT16, "int32": DT_INT32}[dtype]
