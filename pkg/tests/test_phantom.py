import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from panceval.metrics import dice, evaluate_case, extract_mask, hausdorff
from panceval.nifti import read_label_volume
from panceval.phantom import (
    ModelProfile,
    Organ,
    Perturbation,
    PhantomError,
    PhantomSpec,
    StudySpec,
    default_study_spec,
    dilate,
    erode,
    generate,
    generate_study,
    load_study_spec,
    rasterize,
)
from panceval.volume import GridSpec

GRID = GridSpec((20, 16, 16))


def _box_spec(pert, grid=GRID):
    organs = (Organ.box(44, (3, 3, 3), (12, 12, 12), grid), Organ.box(5, (14, 13, 0), (19, 15, 4), grid))
    return PhantomSpec(grid, organs, seed=5, perturbation=pert)


def test_none_perturbation_is_identity():
    ref, pred = generate(_box_spec(Perturbation()))
    assert ref == pred
    for code in (44, 5):
        m = evaluate_case(ref, pred, code)
        assert (m.dsc, m.hd_mm) == (1.0, 0.0)


def test_shifted_cuboid_closed_form():
    ref, pred = generate(_box_spec(Perturbation("shift", shift=(3, 0, 0), codes=(44,))))
    a, b = extract_mask(ref, 44), extract_mask(pred, 44)
    assert a.count == 1000
    assert hausdorff(a, b) == 3.0
    assert dice(a, b) == pytest.approx(2 * 7 * 10 * 10 / 2000, abs=1e-15)
    assert np.array_equal(pred.array == 5, ref.array == 5)


@pytest.mark.parametrize("axis", [0, 1, 2])
@pytest.mark.parametrize("delta", [-2, 1, 3])
def test_single_axis_shift_hd(axis, delta):
    grid = GridSpec((24, 24, 24), (1.5, 0.8, 2.0))
    organ = Organ(44, "ellipsoid", (18.0, 9.6, 24.0), (6.0, 4.0, 10.0))
    shift = [0, 0, 0]
    shift[axis] = delta
    ref, pred = generate(PhantomSpec(grid, (organ,), 0, Perturbation("shift", shift=tuple(shift))))
    h = hausdorff(extract_mask(ref, 44), extract_mask(pred, 44))
    assert h == pytest.approx(abs(delta) * grid.spacing[axis], abs=1e-12)


def test_drop_probability_one_is_detection_failure():
    ref, pred = generate(_box_spec(Perturbation("drop", probability=1.0, codes=(44,))))
    m = evaluate_case(ref, pred, 44)
    assert not m.detected and m.dsc == 0.0
    assert (pred.array == 5).sum() == (ref.array == 5).sum()


@given(
    lo=st.tuples(*[st.integers(0, 5)] * 3),
    ext=st.tuples(*[st.integers(1, 6)] * 3),
    spacing=st.tuples(*[st.sampled_from([0.5, 1.0, 1.5, 2.5])] * 3),
)
def test_cuboid_counts_closed_form(lo, ext, spacing):
    grid = GridSpec((12, 12, 12), spacing, (-3.0, 1.0, 7.5))
    hi = tuple(a + e - 1 for a, e in zip(lo, ext))
    arr = rasterize([Organ.box(9, lo, hi, grid)], grid)
    assert int((arr == 9).sum()) == ext[0] * ext[1] * ext[2]


def test_earlier_organ_wins_overlap():
    a = Organ.box(1, (0, 0, 0), (5, 5, 5), GRID)
    b = Organ.box(2, (3, 3, 3), (8, 8, 8), GRID)
    arr = rasterize([a, b], GRID)
    assert (arr[3:6, 3:6, 3:6] == 1).all()
    assert (arr == 2).sum() == 216 - 27


def test_clipping_warns(caplog):
    organ = Organ(3, "cuboid", (0.0, 0.0, 0.0), (4.0, 4.0, 4.0))
    with caplog.at_level(logging.WARNING):
        arr = rasterize([organ], GRID)
    assert "clipped" in caplog.text
    assert int((arr == 3).sum()) == 5**3


def test_morphology():
    m = np.zeros((7, 7, 7), bool)
    m[3, 3, 3] = True
    assert dilate(m, 1).sum() == 7
    assert dilate(m, 2).sum() == 25
    assert erode(dilate(m, 1), 1).sum() == 1
    assert np.array_equal(dilate(m, 0), m)


def test_invalid_organs():
    with pytest.raises(PhantomError):
        Organ(1, "sphere", (0, 0, 0), (1, 1, 1))
    with pytest.raises(PhantomError):
        Organ(1, "cuboid", (0, 0, 0), (1, 0, 1))
    with pytest.raises(PhantomError):
        Organ(0, "cuboid", (0, 0, 0), (1, 1, 1))
    with pytest.raises(PhantomError):
        Perturbation("drop", probability=2.0)


def test_study_determinism(tmp_path):
    spec = default_study_spec(n_cases=4, seed=11, n_dropped=2)
    m1 = generate_study(spec, tmp_path / "a")
    m2 = generate_study(spec, tmp_path / "b")
    assert m1.read_bytes() == m2.read_bytes()
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.nii.gz"))
    assert len(files) == 4 * 4
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    m3 = generate_study(default_study_spec(n_cases=4, seed=12, n_dropped=2), tmp_path / "c")
    assert any((tmp_path / "a" / r).read_bytes() != (tmp_path / "c" / r).read_bytes() for r in files)
    assert m3.exists()


def test_study_detection_pattern_and_dilate_monotonic(tmp_path):
    spec = default_study_spec(n_cases=12, seed=3, n_dropped=8)
    generate_study(spec, tmp_path)
    fails = {}
    dsc = {}
    for p in spec.profiles:
        vals = []
        fails[p.name] = 0
        for i in range(12):
            ref, _ = read_label_volume(tmp_path / "reference" / f"case_{i:04d}.nii.gz")
            pred, _ = read_label_volume(tmp_path / p.name / f"case_{i:04d}.nii.gz")
            m = evaluate_case(ref, pred, 44)
            fails[p.name] += not m.detected
            if m.detected:
                vals.append(m.dsc)
        dsc[p.name] = np.mean(vals)
    assert fails == {"TS": 0, "REF_8": 8, "ALL_45": 0}
    assert dsc["REF_8"] < dsc["TS"] == 1.0


def test_dilate_profile_lowers_dsc():
    grid = GridSpec((20, 20, 20))
    organs = (Organ(44, "ellipsoid", (10.0, 10.0, 10.0), (5.0, 4.0, 3.0)),)
    spec = StudySpec(
        PhantomSpec(grid, organs),
        (ModelProfile("plain"), ModelProfile("fat", Perturbation("dilate", radius=1))),
        n_cases=3,
    )
    from panceval.phantom import study_case

    for i in range(3):
        ref, (plain, fat) = study_case(spec, i)
        assert evaluate_case(ref, fat, 44).dsc < evaluate_case(ref, plain, 44).dsc


def test_study_spec_file(tmp_path):
    (tmp_path / "s.toml").write_text(
        """
seed = 9
n_cases = 2
[grid]
dims = [10, 10, 10]
spacing = [1.0, 1.0, 2.0]
[[organs]]
code = 44
shape = "cuboid"
center = [5.0, 5.0, 10.0]
radii = [2.0, 2.0, 4.0]
[[profiles]]
name = "same"
[[profiles]]
name = "gone"
drop_cases = [1]
"""
    )
    spec = load_study_spec(tmp_path / "s.toml")
    assert spec.n_cases == 2 and spec.seed == 9
    assert [p.name for p in spec.profiles] == ["same", "gone"]
    generate_study(spec, tmp_path / "out")
    assert len((tmp_path / "out" / "manifest.csv").read_text().splitlines()) == 1 + 2 * 2


def test_study_errors(tmp_path):
    spec = default_study_spec(n_cases=1)
    from dataclasses import replace

    with pytest.raises(PhantomError):
        generate_study(replace(spec, n_cases=0), tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(PhantomError, match="cannot create"):
        generate_study(spec, blocker / "sub")


def test_rasterize_keeps_wide_codes():
    arr = rasterize([Organ.box(2**31 - 1, (0, 0, 0), (1, 1, 1), GRID)], GRID)
    assert int(arr.max()) == 2**31 - 1
