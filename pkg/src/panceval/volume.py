"""Volumetric label data model and axis-aligned grid operations.

Voxel arrays are held as numpy arrays of shape ``(nx, ny, nz)``. The
canonical linearization is Fortran order (x varies fastest), exposed via
:attr:`LabelVolume.voxels`. Voxel ``(i, j, k)`` has its center at
``origin + (i * sx, j * sy, k * sz)`` in mm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from .schemes import LabelScheme

DEFAULT_REL_TOL = 1e-3

Triple = tuple[float, float, float]


class GridError(ValueError):
    """Invalid grid geometry or incompatible grids."""


def _as_dims(dims: Sequence[int]) -> tuple[int, int, int]:
    if len(dims) != 3:
        raise GridError(f"expected 3 dims, got {len(dims)}")
    out = tuple(int(d) for d in dims)
    if any(d <= 0 for d in out):
        raise GridError(f"dims must be positive, got {out}")
    return out  # type: ignore[return-value]


def _as_spacing(spacing: Sequence[float]) -> Triple:
    if len(spacing) != 3:
        raise GridError(f"expected 3 spacing components, got {len(spacing)}")
    out = tuple(float(s) for s in spacing)
    if not all(math.isfinite(s) and s > 0 for s in out):
        raise GridError(f"spacing must be positive and finite, got {out}")
    return out  # type: ignore[return-value]


def _as_origin(origin: Sequence[float]) -> Triple:
    if len(origin) != 3:
        raise GridError(f"expected 3 origin components, got {len(origin)}")
    out = tuple(float(o) for o in origin)
    if not all(math.isfinite(o) for o in out):
        raise GridError(f"origin must be finite, got {out}")
    return out  # type: ignore[return-value]


@dataclass(frozen=True)
class GridSpec:
    dims: tuple[int, int, int]
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        object.__setattr__(self, "dims", _as_dims(self.dims))
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))
        object.__setattr__(self, "origin", _as_origin(self.origin))

    @property
    def size(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def diagonal_mm(self) -> float:
        """Distance in mm between the first and last voxel centers."""
        return math.sqrt(sum(((n - 1) * s) ** 2 for n, s in zip(self.dims, self.spacing)))


def _unsigned(arr: np.ndarray) -> np.ndarray:
    if arr.dtype.kind == "u":
        return arr
    if arr.dtype.kind == "b":
        return arr.astype(np.uint8)
    if arr.dtype.kind != "i":
        if arr.dtype.kind == "f" and np.all(np.isfinite(arr)) and np.all(arr == np.round(arr)):
            arr = arr.astype(np.int64)
        else:
            raise ValueError(f"label voxels must be integers, got dtype {arr.dtype}")
    if arr.size and arr.min() < 0:
        raise ValueError("label voxels must be non-negative")
    return arr.astype(np.dtype(f"u{arr.dtype.itemsize}"))


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Immutable 3D grid of unsigned label codes (0 = background)."""

    array: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)
    grid: GridSpec = field(init=False, repr=False)

    def __post_init__(self) -> None:
        arr = np.asarray(self.array)
        if arr.ndim != 3:
            raise GridError(f"label array must be 3D, got shape {arr.shape}")
        arr = np.array(_unsigned(arr), copy=True)
        arr.setflags(write=False)
        grid = GridSpec(arr.shape, self.spacing, self.origin)
        object.__setattr__(self, "array", arr)
        object.__setattr__(self, "spacing", grid.spacing)
        object.__setattr__(self, "origin", grid.origin)
        object.__setattr__(self, "grid", grid)

    @classmethod
    def from_voxels(cls, voxels: Sequence[int] | np.ndarray, grid: GridSpec) -> "LabelVolume":
        """Build from a flat x-fastest voxel sequence."""
        flat = np.asarray(voxels)
        if flat.ndim != 1 or flat.size != grid.size:
            raise GridError(f"expected {grid.size} voxels for dims {grid.dims}, got {flat.size}")
        return cls(flat.reshape(grid.dims, order="F"), grid.spacing, grid.origin)

    @classmethod
    def zeros(cls, grid: GridSpec, dtype=np.uint8) -> "LabelVolume":
        return cls(np.zeros(grid.dims, dtype=dtype), grid.spacing, grid.origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.grid.dims

    @property
    def voxels(self) -> np.ndarray:
        """Flat voxel codes in canonical order (x fastest)."""
        return self.array.ravel(order="F")

    def with_array(self, array: np.ndarray) -> "LabelVolume":
        return LabelVolume(array, self.spacing, self.origin)

    def labels(self) -> set[int]:
        return {int(c) for c in np.unique(self.array)}

    def counts(self) -> dict[int, int]:
        codes, counts = np.unique(self.array, return_counts=True)
        return {int(c): int(n) for c, n in zip(codes, counts)}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LabelVolume):
            return NotImplemented
        return (
            self.grid == other.grid
            and self.array.shape == other.array.shape
            and bool(np.array_equal(self.array, other.array))
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class ValidationReport:
    offending: tuple[tuple[int, int], ...] = ()

    @property
    def ok(self) -> bool:
        return not self.offending


def validate_against_scheme(vol: LabelVolume, scheme: "LabelScheme") -> ValidationReport:
    """List every voxel code not declared in ``scheme`` with its voxel count."""
    known = set(scheme.codes)
    bad = tuple((code, n) for code, n in sorted(vol.counts().items()) if code not in known)
    return ValidationReport(bad)


def grids_compatible(a: GridSpec, b: GridSpec, rel_tol: float = DEFAULT_REL_TOL) -> bool:
    """Dims equal; spacing within ``rel_tol`` relative; origin within ``rel_tol * spacing``."""
    if rel_tol < 0:
        raise ValueError("rel_tol must be non-negative")
    if a.dims != b.dims:
        return False
    for sa, sb, oa, ob in zip(a.spacing, b.spacing, a.origin, b.origin):
        ref = max(sa, sb)
        if abs(sa - sb) > rel_tol * ref:
            return False
        if abs(oa - ob) > rel_tol * ref:
            return False
    return True


def _nearest_indices(n_in: int, s_in: float, o_in: float, n_out: int, s_out: float, o_out: float) -> np.ndarray:
    # continuous input index of each output center; ties (frac == .5) go to the lower index
    t = (o_out + np.arange(n_out) * s_out - o_in) / s_in
    idx = np.ceil(t - 0.5).astype(np.int64)
    return np.clip(idx, 0, n_in - 1)


def resample_nearest(vol: LabelVolume, target: GridSpec) -> LabelVolume:
    """Nearest-neighbor resample of a label volume onto ``target``.

    Output centers beyond the input extent take the code of the closest
    edge voxel. Exactly equidistant centers resolve to the lower index.
    """
    if not isinstance(target, GridSpec):
        raise GridError("target must be a GridSpec")
    if not all(math.isfinite(s) and s > 0 for s in target.spacing):
        raise GridError(f"non-finite target spacing {target.spacing}")
    if target == vol.grid:
        return vol
    axes = [
        _nearest_indices(n_in, s_in, o_in, n_out, s_out, o_out)
        for n_in, s_in, o_in, n_out, s_out, o_out in zip(
            vol.dims, vol.spacing, vol.origin, target.dims, target.spacing, target.origin
        )
    ]
    out = vol.array[np.ix_(*axes)]
    return LabelVolume(out, target.spacing, target.origin)
