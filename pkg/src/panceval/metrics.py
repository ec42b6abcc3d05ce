"""Per-case segmentation metrics: Dice, Hausdorff distance and detection."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .edt import squared_edt
from .volume import DEFAULT_REL_TOL, GridError, GridSpec, LabelVolume, grids_compatible, resample_nearest


class HDPolicy(str, Enum):
    MISSING = "missing"
    IMPUTE_DIAGONAL = "impute-diagonal"


@dataclass(frozen=True, eq=False)
class BinaryMask:
    grid: GridSpec
    bits: np.ndarray

    def __post_init__(self) -> None:
        bits = np.asarray(self.bits, dtype=bool)
        if bits.shape != self.grid.dims:
            raise GridError(f"mask shape {bits.shape} does not match grid dims {self.grid.dims}")
        bits = bits.copy()
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @classmethod
    def from_array(cls, bits, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> "BinaryMask":
        bits = np.asarray(bits, dtype=bool)
        return cls(GridSpec(bits.shape, spacing, origin), bits)

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    @property
    def empty(self) -> bool:
        return not self.bits.any()


def extract_mask(vol: LabelVolume, code: int) -> BinaryMask:
    return BinaryMask(vol.grid, vol.array == code)


def _check(a: BinaryMask, b: BinaryMask, rel_tol: float = DEFAULT_REL_TOL) -> None:
    if not grids_compatible(a.grid, b.grid, rel_tol):
        raise GridError(f"incompatible grids: {a.grid} vs {b.grid}")


def dice(a: BinaryMask, b: BinaryMask) -> float:
    """2|A∩B| / (|A|+|B|); 1.0 when both masks are empty."""
    _check(a, b)
    na, nb = a.count, b.count
    if na + nb == 0:
        return 1.0
    inter = int(np.count_nonzero(a.bits & b.bits))
    return 2.0 * inter / (na + nb)


def boundary(bits: np.ndarray) -> np.ndarray:
    """Foreground voxels with a 6-connected background or out-of-volume neighbor."""
    padded = np.pad(np.asarray(bits, dtype=bool), 1, constant_values=False)
    core = padded[1:-1, 1:-1, 1:-1]
    interior = core.copy()
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return core & ~interior


def edt(mask: BinaryMask) -> np.ndarray:
    """Distance field in mm from each voxel center to the nearest foreground center."""
    if mask.empty:
        raise ValueError("edt of an empty mask is undefined")
    return np.sqrt(squared_edt(mask.bits, mask.grid.spacing))


def _directed(src: np.ndarray, dst: np.ndarray, spacing) -> float:
    d2 = squared_edt(dst, spacing)
    return float(np.sqrt(d2[src].max()))


def hausdorff(a: BinaryMask, b: BinaryMask) -> float:
    """Symmetric Hausdorff distance in mm between the 6-connected boundaries."""
    _check(a, b)
    if a.empty or b.empty:
        raise ValueError("Hausdorff distance needs two non-empty masks")
    ba, bb = boundary(a.bits), boundary(b.bits)
    spacing = a.grid.spacing
    return max(_directed(ba, bb, spacing), _directed(bb, ba, spacing))


def detect(pred: BinaryMask, min_voxels: int = 0) -> bool:
    return pred.count > min_voxels

@dataclass(frozen=True)
class CaseMetrics:
    case_id: str
    model_id: str
    dsc: float | None
    hd_mm: float | None
    detected: bool
    hd_imputed: bool = False

    def __post_init__(self) -> None:
        if self.dsc is not None and not 0.0 <= self.dsc <= 1.0:
            raise ValueError(f"dsc out of range: {self.dsc}")
        if self.hd_mm is not None and not self.hd_mm >= 0.0:
            raise ValueError(f"hd_mm must be non-negative: {self.hd_mm}")


def evaluate_case(
    ref: LabelVolume,
    pred: LabelVolume,
    code: int,
    policy: HDPolicy | str = HDPolicy.IMPUTE_DIAGONAL,
    *,
    pred_code: int | None = None,
    min_voxels: int = 0,
    case_id: str = "",
    model_id: str = "",
    auto_resample: bool = False,
    rel_tol: float = DEFAULT_REL_TOL,
) -> CaseMetrics:
    """Score one prediction against its reference for a single structure.

    ``pred_code`` selects the structure in ``pred`` when the prediction uses
    a different label scheme (defaults to ``code``). Missing HD (either mask
    empty) is left as ``None`` under ``missing`` or replaced by the reference
    grid diagonal under ``impute-diagonal``.
    """
    policy = HDPolicy(policy)
    if not grids_compatible(ref.grid, pred.grid, rel_tol):
        if not auto_resample:
            raise GridError(f"case {case_id!r}: prediction grid {pred.grid} differs from reference {ref.grid}")
        pred = resample_nearest(pred, ref.grid)
    a = extract_mask(ref, code)
    b = extract_mask(pred, code if pred_code is None else pred_code)
    # compatible grids may still differ by header rounding; score on the reference grid
    b = BinaryMask(a.grid, b.bits)
    found = detect(b, min_voxels)
    dsc = dice(a, b)
    if not a.empty and not b.empty:
        return CaseMetrics(case_id, model_id, dsc, hausdorff(a, b), found, False)
    if policy is HDPolicy.MISSING:
        return CaseMetrics(case_id, model_id, dsc, None, found, False)
    return CaseMetrics(case_id, model_id, dsc, ref.grid.diagonal_mm(), found, True)
