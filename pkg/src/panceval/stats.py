"""Paired nonparametric tests for comparing k segmentation models over n cases.

Omnibus: Friedman (continuous metrics), Cochran's Q (binary outcomes).
Post hoc: Nemenyi (studentized range, infinite df) and exact McNemar with
Bonferroni correction.
"""

from __future__ import annotations

import itertools
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

_EPS = 1e-15
_MAX_ITER = 10_000


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class TestResult:
    statistic: float
    pvalue: float
    df: int | None
    method: str

    __test__ = False  # not a pytest class

    def __post_init__(self) -> None:
        if not 0.0 <= self.pvalue <= 1.0:
            raise StatsError(f"p-value outside [0, 1]: {self.pvalue}")


# --- chi-square tail ---------------------------------------------------------


def _lower_series(a: float, x: float) -> float:
    # P(a, x) by the power series; converges quickly for x < a + 1
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _upper_fraction(a: float, x: float) -> float:
    # Q(a, x) by the Legendre continued fraction, modified Lentz evaluation
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def gammaincc(a: float, x: float) -> float:
    """Regularized upper incomplete gamma function Q(a, x)."""
    if a <= 0:
        raise StatsError("gammaincc requires a > 0")
    if x < 0:
        raise StatsError("gammaincc requires x >= 0")
    if x == 0:
        return 1.0
    if math.isinf(x):
        return 0.0
    if x < a + 1.0:
        return max(0.0, 1.0 - _lower_series(a, x))
    return min(1.0, _upper_fraction(a, x))


def chi2_sf(x: float, df: int) -> float:
    """Upper tail probability of the chi-square distribution."""
    if df <= 0:
        raise StatsError(f"degrees of freedom must be positive, got {df}")
    if x < 0 or math.isnan(x):
        raise StatsError(f"chi-square statistic must be non-negative, got {x}")
    return gammaincc(df / 2.0, x / 2.0)


# --- input handling -----------------------------------------------------------


def complete_rows(data) -> np.ndarray:
    """Drop rows containing NaN (listwise deletion)."""
    arr = np.asarray(data, dtype=float)
    if arr.ndim != 2:
        raise StatsError(f"expected an n x k matrix, got shape {arr.shape}")
    keep = ~np.isnan(arr).any(axis=1)
    dropped = int((~keep).sum())
    if dropped:
        log.info("listwise deletion dropped %d of %d rows", dropped, arr.shape[0])
    return arr[keep]


def _checked_continuous(data) -> np.ndarray:
    arr = complete_rows(data)
    n, k = arr.shape
    if k < 2:
        raise StatsError(f"need at least 2 models, got {k}")
    if n < 2:
        raise StatsError(f"need at least 2 complete rows, got {n}")
    return arr


def rank_rows(arr: np.ndarray) -> np.ndarray:
    """Within-row ranks 1..k, ties get the average (mid) rank."""
    arr = np.asarray(arr, dtype=float)
    ranks = np.empty_like(arr)
    for i, row in enumerate(arr):
        order = np.argsort(row, kind="stable")
        sorted_row = row[order]
        r = np.empty(len(row))
        j = 0
        while j < len(row):
            t = j
            while t + 1 < len(row) and sorted_row[t + 1] == sorted_row[j]:
                t += 1
            r[order[j : t + 1]] = (j + t) / 2.0 + 1.0
            j = t + 1
        ranks[i] = r
    return ranks


def _tie_term(arr: np.ndarray) -> float:
    total = 0.0
    for row in arr:
        _, counts = np.unique(row, return_counts=True)
        total += float(np.sum(counts.astype(float) ** 3 - counts))
    return total


# --- Friedman -----------------------------------------------------------------


def _friedman_stat(rank_sums: np.ndarray, n: int, k: int, ties: float) -> float:
    denom = 1.0 - ties / (n * k * (k * k - 1))
    if denom <= 0:
        return 0.0
    raw = 12.0 / (n * k * (k + 1)) * float(np.sum(rank_sums**2)) - 3.0 * n * (k + 1)
    return max(raw, 0.0) / denom


def _friedman_exact_p(ranks: np.ndarray) -> float:
    """Permutation p-value: every row's ranks permuted independently."""
    n, k = ranks.shape
    doubled = np.rint(2 * ranks).astype(int)
    observed = int(np.sum(doubled.sum(axis=0) ** 2))
    dist: dict[tuple[int, ...], int] = {(0,) * k: 1}
    for row in doubled:
        perms = list(itertools.permutations(row.tolist()))
        nxt: dict[tuple[int, ...], int] = defaultdict(int)
        for sums, count in dist.items():
            for p in perms:
                nxt[tuple(s + v for s, v in zip(sums, p))] += count
        dist = nxt
    total = math.factorial(k) ** n
    hits = sum(c for sums, c in dist.items() if sum(s * s for s in sums) >= observed)
    return float(Fraction(hits, total))


def friedman(data, method: str = "asymptotic") -> TestResult:
    """Friedman rank test over an n x k matrix (rows = cases, columns = models).

    Parameters
    ----------
    data : array_like, shape (n, k)
        Rows with NaN are removed before ranking.
    method : {"asymptotic", "exact"}
        ``asymptotic`` refers the tie-corrected statistic to chi-square with
        k - 1 df. ``exact`` enumerates the permutation distribution of the
        column rank sums; cost grows as (k!)^n so keep it to small designs.
    """
    arr = _checked_continuous(data)
    n, k = arr.shape
    ranks = rank_rows(arr)
    ties = _tie_term(arr)
    if ties >= n * k * (k * k - 1):
        return TestResult(0.0, 1.0, k - 1, f"friedman-{method}")
    stat = _friedman_stat(ranks.sum(axis=0), n, k, ties)
    if method == "asymptotic":
        p = chi2_sf(stat, k - 1)
    elif method == "exact":
        p = _friedman_exact_p(ranks)
    else:
        raise StatsError(f"unknown Friedman method {method!r}")
    return TestResult(stat, p, k - 1, f"friedman-{method}")


# --- studentized range (infinite df) ------------------------------------------

_GL_LO = np.polynomial.legendre.leggauss(10)
_GL_HI = np.polynomial.legendre.leggauss(21)


def _gl(f: Callable[[np.ndarray], np.ndarray], a: float, b: float, rule) -> float:
    x, w = rule
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    return half * float(np.dot(w, f(mid + half * x)))


def adaptive_quad(f: Callable[[np.ndarray], np.ndarray], a: float, b: float, tol: float = 1e-12, depth: int = 40) -> float:
    """Adaptive Gauss-Legendre quadrature (10- vs 21-point error estimate).

    ``f`` must accept a numpy array of abscissae.
    """
    stack = [(a, b, tol, 0)]
    total = 0.0
    while stack:
        lo, hi, eps, level = stack.pop()
        fine = _gl(f, lo, hi, _GL_HI)
        coarse = _gl(f, lo, hi, _GL_LO)
        if abs(fine - coarse) <= eps or level >= depth:
            total += fine
            continue
        mid = 0.5 * (lo + hi)
        stack.append((lo, mid, eps / 2, level + 1))
        stack.append((mid, hi, eps / 2, level + 1))
    return total


_erfc = np.vectorize(math.erfc, otypes=[float])


def _norm_sf(x: np.ndarray) -> np.ndarray:
    return 0.5 * _erfc(np.asarray(x) / math.sqrt(2.0))


def range_sf(q: float, k: int) -> float:
    """P(max - min >= q) for k independent standard normal variables.

    Uses P = k * int phi(z) [(1 - Phi(z))^(k-1) - (Phi(z+q) - Phi(z))^(k-1)] dz,
    with the bracket factored so the small difference 1 - Phi(z + q) is
    evaluated directly.
    """
    if k < 2:
        raise StatsError("range distribution needs k >= 2")
    if q <= 0:
        return 1.0
    m = k - 1

    def integrand(z: np.ndarray) -> np.ndarray:
        upper = _norm_sf(z)  # 1 - Phi(z)
        gap = _norm_sf(z + q)  # 1 - Phi(z + q)
        inner = upper - gap  # Phi(z + q) - Phi(z)
        acc = np.zeros_like(z)
        for i in range(m):
            acc += upper**i * inner ** (m - 1 - i)
        phi = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
        return k * phi * gap * acc

    p = adaptive_quad(integrand, -12.0, 12.0, tol=1e-13)
    return min(1.0, max(0.0, p))


def nemenyi(data) -> np.ndarray:
    """Pairwise Nemenyi p-values (k x k, symmetric, unit diagonal).

    The studentized range statistic is |mean rank_i - mean rank_j| /
    sqrt(k (k + 1) / (12 n)), referred to the range of k standard normals.
    """
    arr = _checked_continuous(data)
    n, k = arr.shape
    mean_ranks = rank_rows(arr).mean(axis=0)
    scale = math.sqrt(k * (k + 1) / (12.0 * n))
    table = np.ones((k, k))
    for i, j in itertools.combinations(range(k), 2):
        q = abs(mean_ranks[i] - mean_ranks[j]) / scale
        table[i, j] = table[j, i] = range_sf(q, k)
    return table


# --- binary outcomes ----------------------------------------------------------


def cochran_q(data) -> TestResult:
    """Cochran's Q over an n x k binary matrix."""
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise StatsError(f"expected an n x k matrix, got shape {arr.shape}")
    n, k = arr.shape
    if k < 2:
        raise StatsError(f"need at least 2 models, got {k}")
    x = arr.astype(bool).astype(np.int64)
    col = x.sum(axis=0)
    row = x.sum(axis=1)
    denom = int(k * row.sum() - (row**2).sum())
    if denom == 0:
        return TestResult(0.0, 1.0, k - 1, "cochran-q")
    numer = (k - 1) * int(k * (col**2).sum() - col.sum() ** 2)
    q = numer / denom
    return TestResult(q, chi2_sf(q, k - 1), k - 1, "cochran-q")


def mcnemar_exact(a: Sequence[bool], b: Sequence[bool]) -> TestResult:
    """Exact two-sided McNemar test from the discordant pair counts.

    The returned statistic is the smaller discordant count.
    """
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise StatsError("McNemar columns must have equal length")
    only_a = int(np.count_nonzero(a & ~b))
    only_b = int(np.count_nonzero(~a & b))
    return TestResult(float(min(only_a, only_b)), mcnemar_p(only_a, only_b), None, "mcnemar-exact")


def mcnemar_p(b: int, c: int) -> float:
    n = b + c
    if n == 0:
        return 1.0
    tail = sum(math.comb(n, i) for i in range(min(b, c) + 1))
    return float(min(Fraction(1), Fraction(2 * tail, 2**n)))


def bonferroni(p: float, m: int) -> float:
    if m < 1:
        raise StatsError(f"comparison count must be >= 1, got {m}")
    return min(1.0, m * p)


# --- study aggregation --------------------------------------------------------


@dataclass
class StudyResult:
    models: list[str]
    n_cases: int
    n_dropped: int
    n_dsc: int
    n_hd: int
    dsc: dict[str, tuple[float, float]]
    hd: dict[str, tuple[float, float]]
    hd_imputed: dict[str, int]
    detection_failures: dict[str, int]
    omnibus: dict[str, TestResult]
    pairwise: dict[str, dict[tuple[str, str], float]]
    pairwise_raw: dict[str, dict[tuple[str, str], float]] = field(default_factory=dict)

    def pairs(self) -> list[tuple[str, str]]:
        return list(itertools.combinations(self.models, 2))

    def to_dict(self) -> dict:
        def res(r: TestResult) -> dict:
            return {"statistic": r.statistic, "pvalue": r.pvalue, "df": r.df, "method": r.method}

        def table(t: dict[tuple[str, str], float]) -> list[dict]:
            return [{"a": a, "b": b, "pvalue": p} for (a, b), p in t.items()]

        return {
            "models": self.models,
            "n_cases": self.n_cases,
            "n_dropped": self.n_dropped,
            "n_dsc": self.n_dsc,
            "n_hd": self.n_hd,
            "summary": {
                "dsc": {m: {"mean": v[0], "sd": v[1]} for m, v in self.dsc.items()},
                "hd_mm": {m: {"mean": v[0], "sd": v[1]} for m, v in self.hd.items()},
                "hd_imputed": self.hd_imputed,
                "detection_failures": self.detection_failures,
            },
            "omnibus": {name: res(r) for name, r in self.omnibus.items()},
            "pairwise": {name: table(t) for name, t in self.pairwise.items()},
            "pairwise_uncorrected": {name: table(t) for name, t in self.pairwise_raw.items()},
        }


def _mean_sd(col: np.ndarray) -> tuple[float, float]:
    if col.size == 0:
        return (math.nan, math.nan)
    sd = float(np.std(col, ddof=1)) if col.size > 1 else 0.0
    return (float(np.mean(col)), sd)


def _nan(v: float | None) -> float:
    return math.nan if v is None else float(v)


def run_study(metrics: Iterable, models: Sequence[str] | None = None) -> StudyResult:
    """Aggregate per-case metrics of k models and run the full test battery.

    ``metrics`` holds objects with ``case_id``, ``model_id``, ``dsc``,
    ``hd_mm``, ``detected`` and ``hd_imputed`` attributes. Cases without a
    row for every model are dropped; rows with a missing HD are dropped for
    the HD tests only.
    """
    rows = list(metrics)
    if models is None:
        models = list(dict.fromkeys(r.model_id for r in rows))
    models = list(models)
    k = len(models)
    if k < 2:
        raise StatsError(f"need at least 2 models, got {k}")
    by_case: dict[str, dict[str, object]] = {}
    for r in rows:
        if r.model_id not in models:
            continue
        slot = by_case.setdefault(r.case_id, {})
        if r.model_id in slot:
            raise StatsError(f"duplicate row for case {r.case_id!r}, model {r.model_id!r}")
        slot[r.model_id] = r
    cases = [c for c, slot in by_case.items() if len(slot) == k]
    dropped = len(by_case) - len(cases)
    if dropped:
        log.warning("dropped %d case(s) lacking results for every model", dropped)
    if not cases:
        raise StatsError("no case has results for every model")

    grid = [[by_case[c][m] for m in models] for c in cases]
    dsc = np.array([[_nan(r.dsc) for r in row] for row in grid])
    hd = np.array([[_nan(r.hd_mm) for r in row] for row in grid])
    det = np.array([[bool(r.detected) for r in row] for row in grid])
    imputed = np.array([[bool(r.hd_imputed) for r in row] for row in grid])

    dsc_ok = complete_rows(dsc)
    hd_ok = complete_rows(hd)
    if len(hd_ok) < len(hd):
        log.warning("HD tests use %d of %d cases (missing HD dropped listwise)", len(hd_ok), len(hd))

    def omni(arr: np.ndarray, name: str) -> tuple[TestResult, np.ndarray]:
        if arr.shape[0] < 2:
            log.warning("%s: fewer than 2 complete cases, tests skipped", name)
            return TestResult(0.0, 1.0, k - 1, "friedman-skipped"), np.ones((k, k))
        return friedman(arr), nemenyi(arr)

    f_dsc, nem_dsc = omni(dsc_ok, "DSC")
    f_hd, nem_hd = omni(hd_ok, "HD")
    q_det = cochran_q(det)

    pairs = list(itertools.combinations(range(k), 2))
    m = len(pairs)
    raw_det = {(models[i], models[j]): mcnemar_exact(det[:, i], det[:, j]).pvalue for i, j in pairs}
    return StudyResult(
        models=models,
        n_cases=len(cases),
        n_dropped=dropped,
        n_dsc=int(dsc_ok.shape[0]),
        n_hd=int(hd_ok.shape[0]),
        dsc={mname: _mean_sd(dsc_ok[:, i]) for i, mname in enumerate(models)},
        hd={mname: _mean_sd(hd_ok[:, i]) for i, mname in enumerate(models)},
        hd_imputed={mname: int(imputed[:, i].sum()) for i, mname in enumerate(models)},
        detection_failures={mname: int((~det[:, i]).sum()) for i, mname in enumerate(models)},
        omnibus={"dsc": f_dsc, "hd": f_hd, "detection": q_det},
        pairwise={
            "dsc": {(models[i], models[j]): float(nem_dsc[i, j]) for i, j in pairs},
            "hd": {(models[i], models[j]): float(nem_hd[i, j]) for i, j in pairs},
            "detection": {key: bonferroni(p, m) for key, p in raw_det.items()},
        },
        pairwise_raw={"detection": raw_det},
    )
