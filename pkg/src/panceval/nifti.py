"""Single-file NIfTI-1 reader/writer for integer label volumes.

Only the header fields needed for label maps are interpreted. Orientation
is reduced to an axis permutation plus flips so the returned volume is
axis-aligned with x varying fastest; sform takes precedence over qform
when both are set. Oblique affines are rejected.
"""

from __future__ import annotations

import gzip
import math
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volume import LabelVolume

HEADER_SIZE = 348
VOX_OFFSET = 352
GZIP_MAGIC = b"\x1f\x8b"

DT_UINT8 = 2
DT_INT16 = 4
DT_INT32 = 8
DT_UINT16 = 512

DATATYPES: dict[int, tuple[str, int]] = {
    DT_UINT8: ("u1", 8),
    DT_INT16: ("i2", 16),
    DT_INT32: ("i4", 32),
    DT_UINT16: ("u2", 16),
}
_NAMES = {"uint8": DT_UINT8, "int16": DT_INT16, "int32": DT_INT32, "uint16": DT_UINT16}

# tolerance for calling an affine entry zero, relative to the column norm
_OBLIQUE_TOL = 1e-6


class NiftiError(ValueError):
    pass


@dataclass(frozen=True)
class NiftiHeaderSubset:
    dim: tuple[int, ...]
    datatype: int
    bitpix: int
    pixdim: tuple[float, float, float]
    vox_offset: float
    scl_slope: float
    scl_inter: float
    qform_code: int
    sform_code: int
    affine: tuple[tuple[float, ...], ...]
    endian: str


def datatype_code(datatype: int | str) -> int:
    if isinstance(datatype, str):
        try:
            return _NAMES[datatype.lower()]
        except KeyError:
            raise NiftiError(f"unsupported datatype {datatype!r}") from None
    if datatype not in DATATYPES:
        raise NiftiError(f"unsupported datatype code {datatype}")
    return datatype


def _read_bytes(path: Path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == GZIP_MAGIC:
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise NiftiError(f"{path}: corrupt gzip stream ({exc})") from None
    return raw


def quaternion_affine(b: float, c: float, d: float, qfac: float, pixdim, offset) -> np.ndarray:
    a2 = 1.0 - (b * b + c * c + d * d)
    if a2 < 1e-7:
        # 180 degree rotation: renormalize, a = 0
        norm = math.sqrt(b * b + c * c + d * d)
        b, c, d = b / norm, c / norm, d / norm
        a = 0.0
    else:
        a = math.sqrt(a2)
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    )
    qfac = -1.0 if qfac < 0 else 1.0
    scale = np.array([pixdim[0], pixdim[1], qfac * pixdim[2]])
    aff = np.eye(4)
    aff[:3, :3] = rot * scale
    aff[:3, 3] = offset
    return aff


def parse_header(raw: bytes) -> NiftiHeaderSubset:
    if len(raw) < HEADER_SIZE:
        raise NiftiError("malformed header: file shorter than 348 bytes")
    for endian in "<>":
        if struct.unpack_from(endian + "i", raw, 0)[0] == HEADER_SIZE:
            break
    else:
        raise NiftiError("malformed header: sizeof_hdr is not 348")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise NiftiError(f"malformed header: bad magic {magic!r}")
    if magic == b"ni1\x00":
        raise NiftiError("two-file NIfTI (.hdr/.img) is not supported")

    def get(fmt: str, off: int):
        return struct.unpack_from(endian + fmt, raw, off)

    dim = get("8h", 40)
    datatype, bitpix = get("2h", 70)
    pixdim = get("8f", 76)
    (vox_offset,) = get("f", 108)
    scl_slope, scl_inter = get("2f", 112)
    qform_code, sform_code = get("2h", 252)
    qb, qc, qd, qx, qy, qz = get("6f", 256)
    srow = np.array(get("12f", 280), dtype=np.float64).reshape(3, 4)

    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiError(f"malformed header: dim[0] = {ndim}")
    dims = list(dim[1 : ndim + 1])
    if any(d < 1 for d in dims):
        raise NiftiError(f"malformed header: non-positive dims {dims}")
    if any(d != 1 for d in dims[3:]):
        raise NiftiError(f"only 3D volumes are supported, got dims {dims}")
    dims = (dims + [1, 1, 1])[:3]

    if datatype not in DATATYPES:
        raise NiftiError(f"unsupported datatype {datatype}")
    if bitpix != DATATYPES[datatype][1]:
        raise NiftiError(f"malformed header: bitpix {bitpix} inconsistent with datatype {datatype}")
    if not (scl_slope in (0.0, 1.0) and scl_inter == 0.0) and not math.isnan(scl_slope):
        raise NiftiError(f"non-identity scaling (scl_slope={scl_slope}, scl_inter={scl_inter})")
    if vox_offset < VOX_OFFSET:
        raise NiftiError(f"malformed header: vox_offset {vox_offset} < {VOX_OFFSET}")

    spacing = tuple(abs(float(p)) if p != 0 else 1.0 for p in pixdim[1:4])
    if sform_code > 0:
        affine = np.vstack([srow, [0, 0, 0, 1]])
    elif qform_code > 0:
        affine = quaternion_affine(qb, qc, qd, pixdim[0], spacing, (qx, qy, qz))
    else:
        affine = np.diag([*spacing, 1.0])
    return NiftiHeaderSubset(
        dim=tuple(dims),
        datatype=datatype,
        bitpix=bitpix,
        pixdim=spacing,  # type: ignore[arg-type]
        vox_offset=vox_offset,
        scl_slope=scl_slope,
        scl_inter=scl_inter,
        qform_code=qform_code,
        sform_code=sform_code,
        affine=tuple(tuple(float(v) for v in row) for row in affine),
        endian=endian,
    )


def _axis_aligned(array: np.ndarray, affine: np.ndarray):
    """Reorder ``array`` so voxel axes follow world x, y, z with positive steps."""
    lin = affine[:3, :3]
    perm = []
    for col in range(3):
        column = lin[:, col]
        norm = float(np.abs(column).max())
        if not math.isfinite(norm) or norm == 0:
            raise NiftiError("degenerate affine")
        big = np.flatnonzero(np.abs(column) > _OBLIQUE_TOL * norm)
        if big.size != 1:
            raise NiftiError("oblique orientation is not supported")
        perm.append(int(big[0]))
    if sorted(perm) != [0, 1, 2]:
        raise NiftiError("oblique orientation is not supported")
    # voxel axis for each world axis
    order = [perm.index(w) for w in range(3)]
    spacing = []
    origin = []
    data = np.transpose(array, order)
    for w, ax in enumerate(order):
        step = float(lin[w, ax])
        start = float(affine[w, 3])
        if step < 0:
            start += step * (array.shape[ax] - 1)
            data = np.flip(data, axis=w)
        spacing.append(abs(step))
        origin.append(start)
    return np.ascontiguousarray(data), tuple(spacing), tuple(origin)


def read_label_volume(path: str | os.PathLike) -> tuple[LabelVolume, NiftiHeaderSubset]:
    """Read a ``.nii`` or ``.nii.gz`` label file into an axis-aligned volume."""
    path = Path(path)
    raw = _read_bytes(path)
    hdr = parse_header(raw)
    code, _ = DATATYPES[hdr.datatype]
    dtype = np.dtype(hdr.endian + code)
    n = int(np.prod(hdr.dim))
    start = int(hdr.vox_offset)
    if len(raw) < start + n * dtype.itemsize:
        raise NiftiError(f"{path}: payload truncated")
    flat = np.frombuffer(raw, dtype=dtype, count=n, offset=start)
    if dtype.kind == "i" and n and flat.min() < 0:
        raise NiftiError(f"{path}: negative label value {int(flat.min())}")
    array = flat.reshape(hdr.dim, order="F")
    array = array.astype(np.dtype(f"u{dtype.itemsize}"), copy=False)
    data, spacing, origin = _axis_aligned(array, np.array(hdr.affine))
    return LabelVolume(data, spacing, origin), hdr


def default_datatype(vol: LabelVolume) -> int:
    hi = int(vol.array.max()) if vol.array.size else 0
    return DT_UINT8 if hi < 256 else DT_UINT16


def encode(vol: LabelVolume, datatype: int | str | None = None) -> bytes:
    """Serialize ``vol`` as single-file NIfTI-1 bytes (uncompressed)."""
    dt = default_datatype(vol) if datatype is None else datatype_code(datatype)
    code, bitpix = DATATYPES[dt]
    info = np.iinfo(np.dtype(code))
    hi = int(vol.array.max()) if vol.array.size else 0
    if hi > info.max:
        raise NiftiError(f"code overflow: {hi} does not fit datatype {np.dtype(code).name}")

    hdr = bytearray(VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *vol.dims, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, dt, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *vol.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    struct.pack_into("<B", hdr, 123, 2)  # xyzt_units: mm
    struct.pack_into("<2h", hdr, 252, 1, 1)
    struct.pack_into("<6f", hdr, 256, 0.0, 0.0, 0.0, *vol.origin)
    sx, sy, sz = vol.spacing
    ox, oy, oz = vol.origin
    struct.pack_into("<12f", hdr, 280, sx, 0, 0, ox, 0, sy, 0, oy, 0, 0, sz, oz)
    hdr[344:348] = b"n+1\x00"
    payload = vol.array.astype("<" + code).tobytes(order="F")
    return bytes(hdr) + payload


def write_label_volume(vol: LabelVolume, path: str | os.PathLike, datatype: int | str | None = None) -> Path:
    """Write ``vol``; gzip when the name ends in ``.gz``.

    The file is written to a temporary sibling and renamed into place.
    """
    path = Path(path)
    blob = encode(vol, datatype)
    if path.name.endswith(".gz"):
        # fixed mtime keeps repeated writes byte-identical
        blob = gzip.compress(blob, compresslevel=6, mtime=0)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path
