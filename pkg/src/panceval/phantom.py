"""Deterministic synthetic label phantoms with analytically known metrics.

Random streams come from numpy's PCG64 bit generator seeded through
``numpy.random.SeedSequence``; case ``i`` of a study with seed ``s`` uses the
entropy ``[s, i]`` and model profile ``j`` within it ``[s, i, j + 1]``, so
cases can be generated in any order or in parallel with identical output.
"""

from __future__ import annotations

import csv
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .nifti import write_label_volume
from .volume import GridSpec, LabelVolume

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

SHAPES = ("cuboid", "ellipsoid")
PERTURBATIONS = ("none", "shift", "dilate", "erode", "drop")
MANIFEST_FIELDS = ("case_id", "model_id", "reference", "prediction", "reference_code", "prediction_code")


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class Organ:
    code: int
    shape: str
    center: tuple[float, float, float]
    radii: tuple[float, float, float]

    def __post_init__(self) -> None:
        if self.shape not in SHAPES:
            raise PhantomError(f"unknown shape {self.shape!r}")
        if any(r <= 0 for r in self.radii):
            raise PhantomError(f"radii must be positive, got {self.radii}")
        if self.code <= 0:
            raise PhantomError("organ code must be a non-background label")

    @classmethod
    def box(cls, code: int, lo: Sequence[int], hi: Sequence[int], grid: GridSpec) -> "Organ":
        """Cuboid covering voxel indices ``lo..hi`` inclusive on ``grid``."""
        center = tuple(o + s * (a + b) / 2 for o, s, a, b in zip(grid.origin, grid.spacing, lo, hi))
        half = tuple(s * (b - a + 1) / 2 for s, a, b in zip(grid.spacing, lo, hi))
        return cls(code, "cuboid", center, half)  # type: ignore[arg-type]

    def moved(self, offset_mm: Sequence[float]) -> "Organ":
        return replace(self, center=tuple(c + d for c, d in zip(self.center, offset_mm)))


@dataclass(frozen=True)
class Perturbation:
    kind: str = "none"
    shift: tuple[int, int, int] = (0, 0, 0)
    radius: int = 0
    probability: float = 0.0
    jitter: int = 0
    codes: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if self.kind not in PERTURBATIONS:
            raise PhantomError(f"unknown perturbation {self.kind!r}")
        if self.radius < 0 or self.jitter < 0:
            raise PhantomError("radius and jitter must be non-negative")
        if not 0.0 <= self.probability <= 1.0:
            raise PhantomError("drop probability must lie in [0, 1]")

    def applies_to(self, code: int) -> bool:
        return self.codes is None or code in self.codes


@dataclass(frozen=True)
class PhantomSpec:
    grid: GridSpec
    organs: tuple[Organ, ...]
    seed: int = 0
    perturbation: Perturbation = Perturbation()


def _centers(grid: GridSpec) -> list[np.ndarray]:
    return [o + s * np.arange(n) for n, s, o in zip(grid.dims, grid.spacing, grid.origin)]


def organ_mask(organ: Organ, grid: GridSpec) -> np.ndarray:
    """Voxels whose centers lie inside ``organ`` (closed boundary)."""
    xs, ys, zs = _centers(grid)
    cx, cy, cz = organ.center
    rx, ry, rz = organ.radii
    if organ.shape == "cuboid":
        mx = np.abs(xs - cx) <= rx
        my = np.abs(ys - cy) <= ry
        mz = np.abs(zs - cz) <= rz
        return mx[:, None, None] & my[None, :, None] & mz[None, None, :]
    d = (
        ((xs - cx) / rx)[:, None, None] ** 2
        + ((ys - cy) / ry)[None, :, None] ** 2
        + ((zs - cz) / rz)[None, None, :] ** 2
    )
    return d <= 1.0


def _check_inside(organ: Organ, grid: GridSpec) -> None:
    for c, r, o, s, n in zip(organ.center, organ.radii, grid.origin, grid.spacing, grid.dims):
        if c - r < o - s / 2 or c + r > o + s * (n - 0.5):
            log.warning("organ %d extends beyond the grid and is clipped", organ.code)
            return


def rasterize(organs: Sequence[Organ], grid: GridSpec) -> np.ndarray:
    """Paint organs in order; on overlap the earlier organ keeps the voxel."""
    out = np.zeros(grid.dims, dtype=np.min_scalar_type(max((o.code for o in organs), default=0)))
    for organ in organs:
        _check_inside(organ, grid)
        m = organ_mask(organ, grid) & (out == 0)
        out[m] = organ.code
    return out


def _shift(mask: np.ndarray, delta: Sequence[int]) -> np.ndarray:
    out = np.zeros_like(mask)
    src = []
    dst = []
    for n, d in zip(mask.shape, delta):
        d = int(d)
        if abs(d) >= n:
            return out
        src.append(slice(max(0, -d), n - max(0, d)))
        dst.append(slice(max(0, d), n - max(0, -d)))
    out[tuple(dst)] = mask[tuple(src)]
    return out


def _neighbors(mask: np.ndarray):
    for axis in range(3):
        for step in (-1, 1):
            delta = [0, 0, 0]
            delta[axis] = step
            yield _shift(mask, delta)


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Repeated 6-connected dilation, clipped to the grid."""
    out = mask.copy()
    for _ in range(radius):
        grown = out.copy()
        for nb in _neighbors(out):
            grown |= nb
        out = grown
    return out


def erode(mask: np.ndarray, radius: int) -> np.ndarray:
    """Repeated 6-connected erosion; voxels outside the grid count as background."""
    out = mask.copy()
    for _ in range(radius):
        kept = out.copy()
        for nb in _neighbors(out):
            kept &= nb
        out = kept
    return out


def perturb_mask(mask: np.ndarray, pert: Perturbation, rng: np.random.Generator) -> np.ndarray:
    if pert.kind == "none":
        return mask.copy()
    if pert.kind == "drop":
        return np.zeros_like(mask) if rng.random() < pert.probability else mask.copy()
    if pert.kind == "shift":
        delta = [d + (int(rng.integers(-pert.jitter, pert.jitter + 1)) if pert.jitter else 0) for d in pert.shift]
        return _shift(mask, delta)
    radius = pert.radius + (int(rng.integers(0, pert.jitter + 1)) if pert.jitter else 0)
    return dilate(mask, radius) if pert.kind == "dilate" else erode(mask, radius)


def predict(
    reference: np.ndarray,
    organs: Sequence[Organ],
    pert: Perturbation,
    rng: np.random.Generator,
    drop_codes: Sequence[int] = (),
) -> np.ndarray:
    out = np.zeros_like(reference)
    for organ in organs:
        region = reference == organ.code
        if organ.code in drop_codes:
            continue
        if pert.applies_to(organ.code):
            region = perturb_mask(region, pert, rng)
        out[region & (out == 0)] = organ.code
    return out


def generate(spec: PhantomSpec) -> tuple[LabelVolume, LabelVolume]:
    """Rasterize the reference and derive the perturbed prediction."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(spec.seed)))
    ref = rasterize(spec.organs, spec.grid)
    pred = predict(ref, spec.organs, spec.perturbation, rng)
    g = spec.grid
    return LabelVolume(ref, g.spacing, g.origin), LabelVolume(pred, g.spacing, g.origin)


@dataclass(frozen=True)
class ModelProfile:
    name: str
    perturbation: Perturbation = Perturbation()
    drop_cases: tuple[int, ...] = ()


@dataclass(frozen=True)
class StudySpec:
    base: PhantomSpec
    profiles: tuple[ModelProfile, ...]
    n_cases: int
    code: int = 44
    center_jitter: int = 1
    seed: int = 0
    extra: dict = field(default_factory=dict, compare=False)


def case_id(index: int) -> str:
    return f"case_{index:04d}"


def study_case(spec: StudySpec, index: int) -> tuple[LabelVolume, list[LabelVolume]]:
    """Reference and per-profile predictions for case ``index``."""
    base = spec.base
    g = base.grid
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, index])))
    j = spec.center_jitter
    offset = [int(v) * s for v, s in zip(rng.integers(-j, j + 1, size=3), g.spacing)] if j else [0.0] * 3
    organs = tuple(o.moved(offset) for o in base.organs)
    ref = rasterize(organs, g)
    preds = []
    for p_idx, profile in enumerate(spec.profiles):
        prng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, index, p_idx + 1])))
        drop = (spec.code,) if index in profile.drop_cases else ()
        preds.append(LabelVolume(predict(ref, organs, profile.perturbation, prng, drop), g.spacing, g.origin))
    return LabelVolume(ref, g.spacing, g.origin), preds


def generate_study(spec: StudySpec, out_dir: str | os.PathLike) -> Path:
    """Write reference and prediction volumes plus a manifest; returns the manifest path.

    Layout: ``reference/<case>.nii.gz``, ``<profile>/<case>.nii.gz`` and
    ``manifest.csv`` with paths relative to ``out_dir``.
    """
    if spec.n_cases < 1:
        raise PhantomError("n_cases must be >= 1")
    names = [p.name for p in spec.profiles]
    if len(set(names)) != len(names) or "reference" in names:
        raise PhantomError(f"profile names must be unique and not 'reference': {names}")
    out = Path(out_dir)
    try:
        for sub in ["reference", *names]:
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PhantomError(f"cannot create output directory {out}: {exc}") from None
    rows = []
    for i in range(spec.n_cases):
        cid = case_id(i)
        ref, preds = study_case(spec, i)
        ref_rel = f"reference/{cid}.nii.gz"
        write_label_volume(ref, out / ref_rel)
        for name, pred in zip(names, preds):
            rel = f"{name}/{cid}.nii.gz"
            write_label_volume(pred, out / rel)
            rows.append((cid, name, ref_rel, rel, spec.code, spec.code))
    manifest = out / "manifest.csv"
    tmp = manifest.with_suffix(".csv.tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        w.writerows(rows)
    os.replace(tmp, manifest)
    log.info("wrote %d cases x %d profiles to %s", spec.n_cases, len(names), out)
    return manifest


# --- spec files ---------------------------------------------------------------


def _perturbation(d: dict) -> Perturbation:
    codes = d.get("codes")
    return Perturbation(
        kind=d.get("kind", "none"),
        shift=tuple(int(v) for v in d.get("shift", (0, 0, 0))),  # type: ignore[arg-type]
        radius=int(d.get("radius", 0)),
        probability=float(d.get("probability", 0.0)),
        jitter=int(d.get("jitter", 0)),
        codes=None if codes is None else tuple(int(c) for c in codes),
    )


def parse_study_spec(doc: dict) -> StudySpec:
    try:
        g = doc["grid"]
        grid = GridSpec(tuple(g["dims"]), tuple(g.get("spacing", (1, 1, 1))), tuple(g.get("origin", (0, 0, 0))))
        organs = tuple(
            Organ(int(o["code"]), o.get("shape", "ellipsoid"), tuple(o["center"]), tuple(o["radii"]))
            for o in doc["organs"]
        )
        profiles = tuple(
            ModelProfile(p["name"], _perturbation(p), tuple(int(c) for c in p.get("drop_cases", ())))
            for p in doc["profiles"]
        )
    except KeyError as exc:
        raise PhantomError(f"phantom spec lacks required key {exc}") from None
    seed = int(doc.get("seed", 0))
    return StudySpec(
        base=PhantomSpec(grid, organs, seed),
        profiles=profiles,
        n_cases=int(doc.get("n_cases", 10)),
        code=int(doc.get("code", 44)),
        center_jitter=int(doc.get("center_jitter", 1)),
        seed=seed,
    )


def load_study_spec(path: str | os.PathLike) -> StudySpec:
    with open(path, "rb") as fh:
        return parse_study_spec(tomllib.load(fh))


def default_study_spec(n_cases: int = 50, seed: int = 2024, n_dropped: int = 8) -> StudySpec:
    """Three-model study: exact copy, dropped-or-dilated, exact copy.

    Detection failures follow the pattern (0, n_dropped, 0).
    """
    grid = GridSpec((28, 24, 16), (1.5, 1.5, 2.5), (0.0, 0.0, 0.0))
    organs = (
        Organ(44, "ellipsoid", (21.0, 18.0, 20.0), (9.0, 5.0, 6.0)),
        Organ(40, "cuboid", (21.0, 27.0, 20.0), (2.25, 2.25, 15.0)),
        Organ(5, "ellipsoid", (9.0, 15.0, 20.0), (6.0, 8.0, 10.0)),
    )
    step = max(1, n_cases // max(1, n_dropped))
    dropped = tuple(range(0, step * n_dropped, step))[:n_dropped]
    profiles = (
        ModelProfile("TS"),
        ModelProfile("REF_8", Perturbation("dilate", radius=1, jitter=1, codes=(44,)), dropped),
        ModelProfile("ALL_45"),
    )
    return StudySpec(PhantomSpec(grid, organs, seed), profiles, n_cases, 44, 1, seed)


# --- harmonization source pair ------------------------------------------------


@dataclass(frozen=True)
class SourcePair:
    panorama: LabelVolume
    ts: LabelVolume
    body: LabelVolume
    aorta_overlap: int


def source_pair(grid: GridSpec | None = None, aorta_depth: int = 2) -> SourcePair:
    """Raw PANORAMA and TS_117 volumes with a known arteries/aorta overlap.

    The PANORAMA arteries box reaches ``aorta_depth`` voxels into the TS
    aorta along x; the overlap is ``aorta_depth * 4 * 6`` voxels.
    """
    g = grid or GridSpec((24, 20, 12), (1.0, 1.0, 1.5))
    if not 1 <= aorta_depth <= 4:
        raise PhantomError("aorta_depth must be in 1..4")
    ts_organs = (
        Organ.box(52, (12, 8, 2), (15, 11, 9), g),  # aorta
        Organ.box(7, (4, 2, 3), (11, 6, 8), g),  # TS pancreas
        Organ.box(5, (0, 12, 0), (8, 19, 11), g),  # liver
        Organ.box(1, (17, 0, 0), (23, 5, 11), g),  # spleen
        Organ.box(2, (17, 12, 0), (20, 16, 5), g),  # kidney right
        Organ.box(3, (17, 12, 6), (20, 16, 11), g),  # kidney left
        Organ.box(31, (10, 15, 0), (14, 19, 11), g),  # vertebra L1
        Organ.box(64, (4, 7, 3), (8, 8, 5), g),  # portal / splenic vein
    )
    pano_organs = (
        Organ.box(1, (6, 3, 4), (7, 4, 5), g),  # PDAC lesion
        Organ.box(5, (8, 3, 4), (8, 5, 7), g),  # pancreatic duct
        Organ.box(6, (9, 3, 4), (9, 4, 7), g),  # common bile duct
        Organ.box(4, (3, 2, 3), (11, 6, 8), g),  # pancreas parenchyma
        Organ.box(2, (4, 7, 3), (8, 7, 8), g),  # veins
        Organ.box(3, (6, 8, 3), (11 + aorta_depth, 11, 8), g),  # arteries
    )
    body = np.zeros(g.dims, dtype=np.uint8)
    body[1:-1, 1:-1, :] = 1
    overlap = aorta_depth * 4 * 6
    return SourcePair(
        LabelVolume(rasterize(pano_organs, g), g.spacing, g.origin),
        LabelVolume(rasterize(ts_organs, g), g.spacing, g.origin),
        LabelVolume(body, g.spacing, g.origin),
        overlap,
    )
