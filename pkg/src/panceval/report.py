"""Metrics table I/O and plain-text result tables."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

from .metrics import CaseMetrics
from .stats import StudyResult

METRIC_FIELDS = ("case_id", "model_id", "dsc", "hd_mm", "detected", "hd_imputed")


def format_p(p: float) -> str:
    if math.isnan(p):
        return "n/a"
    if p < 0.0005:
        return "< 0.001"
    return f"{p:.3f}"


def _num(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "y", "t"):
        return True
    if t in ("0", "false", "no", "n", "f", ""):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def atomic_write_text(path: str | os.PathLike, text: str) -> Path:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def metrics_to_csv(rows: Iterable[CaseMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for r in rows:
        w.writerow([r.case_id, r.model_id, _num(r.dsc), _num(r.hd_mm), int(r.detected), int(r.hd_imputed)])
    return buf.getvalue()


def read_metrics(path: str | os.PathLike) -> list[CaseMetrics]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(METRIC_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: metrics table lacks columns {sorted(missing)}")
        return [
            CaseMetrics(
                row["case_id"],
                row["model_id"],
                float(row["dsc"]) if row["dsc"] else None,
                float(row["hd_mm"]) if row["hd_mm"] else None,
                _bool(row["detected"]),
                _bool(row["hd_imputed"]),
            )
            for row in reader
        ]


def _align(rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for n, r in enumerate(rows):
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
        if n == 0:
            lines.append("-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def _pm(v: tuple[float, float], digits: int) -> str:
    mean, sd = v
    if math.isnan(mean):
        return "n/a"
    return f"{mean:.{digits}f} ± {sd:.{digits}f}"


def summary_table(res: StudyResult) -> str:
    """Metric rows x model columns plus the omnibus p-value."""
    rows = [["Metric", *res.models, "p-value"]]
    rows.append(["DSC", *(_pm(res.dsc[m], 2) for m in res.models), format_p(res.omnibus["dsc"].pvalue)])
    rows.append(["HD (mm)", *(_pm(res.hd[m], 1) for m in res.models), format_p(res.omnibus["hd"].pvalue)])
    rows.append(
        [
            "Detection failure (n)",
            *(str(res.detection_failures[m]) for m in res.models),
            format_p(res.omnibus["detection"].pvalue),
        ]
    )
    return _align(rows)


def pairwise_table(res: StudyResult) -> str:
    """Post-hoc p-values: Nemenyi for DSC/HD, Bonferroni-corrected McNemar for detection."""
    pairs = res.pairs()
    rows = [["Metric", *(f"{a} vs. {b}" for a, b in pairs)]]
    for key, label in (("dsc", "DSC"), ("hd", "HD (mm)"), ("detection", "Detection failure (n)")):
        rows.append([label, *(format_p(res.pairwise[key][p]) for p in pairs)])
    return _align(rows)


def render_tables(res: StudyResult) -> str:
    head = f"Cases: {res.n_cases} complete ({res.n_dropped} dropped); DSC n={res.n_dsc}, HD n={res.n_hd}\n"
    imputed = ", ".join(f"{m}={n}" for m, n in res.hd_imputed.items())
    return (
        head
        + f"HD imputed: {imputed}\n\n"
        + "Summary: segmentation performance (Friedman / Cochran's Q)\n"
        + summary_table(res)
        + "\nPairwise comparisons (Nemenyi / McNemar, Bonferroni)\n"
        + pairwise_table(res)
    )


def study_json(res: StudyResult) -> str:
    return json.dumps(res.to_dict(), indent=2, allow_nan=True) + "\n"
