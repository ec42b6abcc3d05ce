"""Label harmonization into the REF_8 and ALL_45 schemes, and cohort balancing."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .schemes import Recipe, default_recipe
from .volume import DEFAULT_REL_TOL, GridError, LabelVolume, grids_compatible

log = logging.getLogger(__name__)


class HarmonizationError(ValueError):
    pass


def _require_compatible(a: LabelVolume, b: LabelVolume, rel_tol: float) -> None:
    if not grids_compatible(a.grid, b.grid, rel_tol):
        raise GridError(f"incompatible grids: {a.grid} vs {b.grid}")


def group_remap(vol: LabelVolume, mapping: Mapping[int, int]) -> LabelVolume:
    """Relabel every voxel through ``mapping`` (must cover every present code)."""
    present = vol.labels()
    missing = present - set(mapping)
    if missing:
        raise HarmonizationError(f"codes {sorted(missing)} present in volume but absent from mapping")
    hi = max(present)
    lut_max = max(mapping[c] for c in present)
    lut = np.zeros(hi + 1, dtype=np.min_scalar_type(lut_max))
    for code in present:
        lut[code] = mapping[code]
    return vol.with_array(lut[vol.array])


def mask_out(
    victim: LabelVolume,
    victim_code: int,
    mask: LabelVolume,
    mask_code: int,
    replacement: int,
    rel_tol: float = DEFAULT_REL_TOL,
) -> LabelVolume:
    """Replace ``victim_code`` voxels that fall on ``mask_code`` in ``mask``."""
    _require_compatible(victim, mask, rel_tol)
    hit = (victim.array == victim_code) & (mask.array == mask_code)
    if not hit.any():
        return victim
    out = victim.array.astype(np.result_type(victim.array.dtype, np.min_scalar_type(replacement)))
    out[hit] = replacement
    return victim.with_array(out)


def precedence_merge(
    base: LabelVolume,
    overlay: LabelVolume,
    overlay_codes: Iterable[int],
    rel_tol: float = DEFAULT_REL_TOL,
) -> LabelVolume:
    """Overlay voxels carrying one of ``overlay_codes`` overwrite ``base``.

    The overlay codes must not occur in ``base``; a collision means the
    recipe assigns one code to two sources and is reported as an error.
    """
    _require_compatible(base, overlay, rel_tol)
    codes = sorted(set(int(c) for c in overlay_codes))
    clash = set(codes) & (base.labels() - {0})
    if clash:
        raise HarmonizationError(f"overlay codes {sorted(clash)} collide with base codes")
    take = np.isin(overlay.array, codes)
    dtype = np.result_type(base.array.dtype, overlay.array.dtype)
    out = np.where(take, overlay.array, base.array).astype(dtype)
    return base.with_array(out)


@dataclass
class HarmonizeLog:
    """Per-case rule application counts."""

    masked_arteries: int = 0
    aorta_voxels: int = 0
    overlay_voxels: int = 0
    body_voxels: int = 0

    def as_dict(self) -> dict[str, int]:
        return dict(self.__dict__)


def build_ref8(
    panorama: LabelVolume,
    ts: LabelVolume,
    recipe: Recipe | None = None,
    rel_tol: float = DEFAULT_REL_TOL,
    stats: HarmonizeLog | None = None,
) -> LabelVolume:
    """PANORAMA labels remapped to REF_8 with the TS aorta cut out of the arteries."""
    r = recipe or default_recipe()
    _require_compatible(panorama, ts, rel_tol)
    refined = group_remap(panorama, r.panorama_to_ref8)
    before = int(np.count_nonzero(refined.array == r.arteries_code))
    refined = mask_out(refined, r.arteries_code, ts, r.aorta_ts_code, r.aorta_code, rel_tol)
    after = int(np.count_nonzero(refined.array == r.arteries_code))
    # TS aorta fills background; other PANORAMA structures keep their voxels
    aorta = ts.with_array(np.where(ts.array == r.aorta_ts_code, r.aorta_code, 0).astype(np.uint8))
    pano_codes = set(r.panorama_to_ref8.values()) - {0}
    out = precedence_merge(aorta, refined, pano_codes - {r.aorta_code}, rel_tol)
    if stats is not None:
        stats.masked_arteries = before - after
        stats.aorta_voxels = int(np.count_nonzero(out.array == r.aorta_code))
    return out


def build_all45(
    panorama: LabelVolume,
    ts: LabelVolume,
    body: LabelVolume | None = None,
    recipe: Recipe | None = None,
    rel_tol: float = DEFAULT_REL_TOL,
    stats: HarmonizeLog | None = None,
) -> LabelVolume:
    """Grouped TS labels with the REF_8 labels laid over them.

    ``body`` is an optional body-region volume; its non-zero voxels that no
    TS structure claims become the body region code.
    """
    r = recipe or default_recipe()
    ref8 = build_ref8(panorama, ts, r, rel_tol, stats)
    grouped = group_remap(ts, r.ts_to_all45)
    if body is not None:
        _require_compatible(grouped, body, rel_tol)
        fill = (grouped.array == 0) & (body.array != 0)
        arr = grouped.array.copy()
        arr[fill] = r.body_code
        grouped = grouped.with_array(arr)
        if stats is not None:
            stats.body_voxels = int(fill.sum())
    overlay_codes = set(r.panorama_to_ref8.values()) - {0}
    out = precedence_merge(grouped, ref8, overlay_codes, rel_tol)
    if stats is not None:
        stats.overlay_voxels = int(np.isin(ref8.array, sorted(overlay_codes)).sum())
    return out


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    pdac: bool
    paths: Mapping[str, str]


def balance_cohort(manifest: Sequence[CaseRecord], seed: int) -> list[CaseRecord]:
    """Keep every minority-class case and an equal-size seeded sample of the majority.

    Sampling is uniform without replacement using numpy's PCG64 seeded with
    ``seed``. Output preserves manifest order.
    """
    ids = [c.case_id for c in manifest]
    if len(set(ids)) != len(ids):
        raise HarmonizationError("duplicate case ids in manifest")
    pos = [i for i, c in enumerate(manifest) if c.pdac]
    neg = [i for i, c in enumerate(manifest) if not c.pdac]
    if not pos or not neg:
        raise HarmonizationError(f"need both classes, got {len(pos)} PDAC and {len(neg)} non-PDAC")
    minority, majority = (pos, neg) if len(pos) <= len(neg) else (neg, pos)
    rng = np.random.Generator(np.random.PCG64(seed))
    picked = rng.choice(len(majority), size=len(minority), replace=False)
    keep = set(minority) | {majority[i] for i in picked}
    log.info("balanced cohort: %d PDAC / %d non-PDAC -> %d per class", len(pos), len(neg), len(minority))
    return [manifest[i] for i in sorted(keep)]
