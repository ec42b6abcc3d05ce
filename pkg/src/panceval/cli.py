"""Batch command-line front end: harmonize, evaluate, stats, phantom, cohort, report."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import harmonize as hz
from .metrics import CaseMetrics, HDPolicy, evaluate_case
from .nifti import read_label_volume, write_label_volume
from .phantom import default_study_spec, generate_study, load_study_spec
from .report import atomic_write_text, metrics_to_csv, read_metrics, render_tables, study_json
from .schemes import load_recipe
from .stats import run_study
from .volume import DEFAULT_REL_TOL, validate_against_scheme

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("panceval")

# environment overrides apply to path settings only
ENV_PATHS = {
    "manifest": "PANCEVAL_MANIFEST",
    "recipe": "PANCEVAL_RECIPE",
    "out": "PANCEVAL_OUT",
    "metrics": "PANCEVAL_METRICS",
}


@dataclass
class RunConfig:
    manifest: str | None = None
    recipe: str | None = None
    metrics: str | None = None
    out: str = "out"
    schemes: tuple[str, ...] = ("REF_8", "ALL_45")
    reference_code: int = 44
    prediction_codes: dict[str, int] = field(default_factory=dict)
    models: tuple[str, ...] | None = None
    hd_policy: str = HDPolicy.IMPUTE_DIAGONAL.value
    min_voxels: int = 0
    rel_tol: float = DEFAULT_REL_TOL
    auto_resample: bool = False
    jobs: int = 0
    strict: bool = False
    seed: int = 0

    @classmethod
    def load(cls, path: str | None) -> "RunConfig":
        cfg = cls()
        if path:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
            known = {f.name for f in fields(cls)}
            unknown = set(doc) - known
            if unknown:
                raise SystemExit(f"config {path}: unknown keys {sorted(unknown)}")
            for key, value in doc.items():
                if key in ("schemes", "models") and value is not None:
                    value = tuple(value)
                if key == "prediction_codes":
                    value = {str(k): int(v) for k, v in value.items()}
                setattr(cfg, key, value)
        for key, var in ENV_PATHS.items():
            if os.environ.get(var):
                setattr(cfg, key, os.environ[var])
        return cfg

    @property
    def workers(self) -> int:
        return self.jobs if self.jobs > 0 else (os.cpu_count() or 1)


def _pmap(fn: Callable, items: Sequence, jobs: int) -> list:
    """Map preserving input order; a process pool when ``jobs > 1``."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _resolve(base: Path, p: str) -> Path:
    q = Path(os.path.expandvars(p))
    return q if q.is_absolute() else base / q


def _read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --- harmonize ---------------------------------------------------------------


def read_case_manifest(path: str | os.PathLike) -> list[hz.CaseRecord]:
    """Manifest columns: case_id, pdac, then one path column per source volume."""
    path = Path(path)
    rows = _read_csv(path)
    records = []
    for row in rows:
        try:
            cid = row.pop("case_id")
            pdac = row.pop("pdac").strip().lower() in ("1", "true", "yes", "pdac")
        except KeyError as exc:
            raise SystemExit(f"{path}: manifest lacks column {exc}") from None
        records.append(hz.CaseRecord(cid, pdac, {k: v for k, v in row.items() if v}))
    ids = [r.case_id for r in records]
    if len(set(ids)) != len(ids):
        raise SystemExit(f"{path}: duplicate case ids")
    return records


def _harmonize_one(task) -> tuple[str, str | None, dict]:
    record, base, out, schemes, recipe_path, rel_tol = task
    try:
        recipe = load_recipe(recipe_path)
        panorama, _ = read_label_volume(_resolve(base, record.paths["panorama"]))
        ts, _ = read_label_volume(_resolve(base, record.paths["ts"]))
        body = None
        if record.paths.get("body"):
            body, _ = read_label_volume(_resolve(base, record.paths["body"]))
        counts = hz.HarmonizeLog()
        outputs = {}
        if "REF_8" in schemes:
            outputs["REF_8"] = hz.build_ref8(panorama, ts, recipe, rel_tol, counts)
        if "ALL_45" in schemes:
            outputs["ALL_45"] = hz.build_all45(panorama, ts, body, recipe, rel_tol, counts)
        for name, vol in outputs.items():
            report = validate_against_scheme(vol, recipe.scheme(name))
            if not report.ok:
                raise ValueError(f"{name} output has codes outside the scheme: {report.offending}")
            write_label_volume(vol, out / name / f"{record.case_id}.nii.gz")
        return record.case_id, None, counts.as_dict()
    except Exception as exc:  # per-case failure is data for the run log
        return record.case_id, f"{type(exc).__name__}: {exc}", {}


def cmd_harmonize(cfg: RunConfig) -> int:
    if not cfg.manifest:
        raise SystemExit("harmonize: --manifest is required")
    records = read_case_manifest(cfg.manifest)
    base = Path(cfg.manifest).parent
    out = Path(cfg.out)
    for name in cfg.schemes:
        if name not in ("REF_8", "ALL_45"):
            raise SystemExit(f"harmonize: unknown target scheme {name!r}")
        (out / name).mkdir(parents=True, exist_ok=True)
    tasks = [(r, base, out, tuple(cfg.schemes), cfg.recipe, cfg.rel_tol) for r in records]
    results = _pmap(_harmonize_one, tasks, cfg.workers)
    cols = ["case_id", "status", *hz.HarmonizeLog().as_dict()]
    lines = [",".join(cols)]
    failed = 0
    for cid, err, counts in results:
        if err:
            failed += 1
            log.error("case %s failed: %s", cid, err)
            lines.append(",".join([cid, "failed"] + [""] * (len(cols) - 2)))
        else:
            log.info("case %s: %s", cid, counts)
            lines.append(",".join([cid, "ok", *(str(counts[c]) for c in cols[2:])]))
    atomic_write_text(out / "harmonize_log.csv", "\n".join(lines) + "\n")
    log.info("harmonized %d case(s), %d failed", len(records) - failed, failed)
    return 1 if failed and cfg.strict else 0


# --- evaluate ----------------------------------------------------------------


@dataclass(frozen=True)
class EvalTask:
    case_id: str
    model_id: str
    reference: str
    prediction: str
    reference_code: int
    prediction_code: int


def read_eval_manifest(path: str | os.PathLike, cfg: RunConfig) -> list[EvalTask]:
    """Long-format manifest: case_id, model_id, reference, prediction[, reference_code, prediction_code]."""
    path = Path(path)
    base = path.parent
    tasks = []
    for row in _read_csv(path):
        try:
            model = row["model_id"]
            ref_code = int(row.get("reference_code") or cfg.reference_code)
            pred_code = cfg.prediction_codes.get(model)
            if pred_code is None:
                pred_code = int(row.get("prediction_code") or ref_code)
            tasks.append(
                EvalTask(
                    row["case_id"],
                    model,
                    str(_resolve(base, row["reference"])),
                    str(_resolve(base, row["prediction"])),
                    ref_code,
                    pred_code,
                )
            )
        except KeyError as exc:
            raise SystemExit(f"{path}: manifest lacks column {exc}") from None
    return tasks


def _evaluate_one(args) -> tuple[CaseMetrics | None, str | None]:
    task, policy, min_voxels, auto_resample, rel_tol = args
    try:
        ref, _ = read_label_volume(task.reference)
        pred, _ = read_label_volume(task.prediction)
        m = evaluate_case(
            ref,
            pred,
            task.reference_code,
            policy,
            pred_code=task.prediction_code,
            min_voxels=min_voxels,
            case_id=task.case_id,
            model_id=task.model_id,
            auto_resample=auto_resample,
            rel_tol=rel_tol,
        )
        return m, None
    except Exception as exc:
        return None, f"{type(exc).__name__}: {exc}"


def evaluate_summary(rows: Sequence[CaseMetrics]) -> str:
    models = list(dict.fromkeys(r.model_id for r in rows))
    lines = ["model_id,n,dsc_mean,dsc_sd,hd_mean,hd_sd,detection_failures,hd_imputed"]
    for m in models:
        sub = [r for r in rows if r.model_id == m]
        d = np.array([r.dsc for r in sub if r.dsc is not None], dtype=float)
        h = np.array([r.hd_mm for r in sub if r.hd_mm is not None], dtype=float)

        def ms(a: np.ndarray) -> list[str]:
            if a.size == 0:
                return ["", ""]
            return [f"{a.mean():.4f}", f"{a.std(ddof=1) if a.size > 1 else 0.0:.4f}"]

        fails = sum(not r.detected for r in sub)
        imputed = sum(r.hd_imputed for r in sub)
        lines.append(",".join([m, str(len(sub)), *ms(d), *ms(h), str(fails), str(imputed)]))
    return "\n".join(lines) + "\n"


def cmd_evaluate(cfg: RunConfig) -> tuple[int, list[CaseMetrics]]:
    if not cfg.manifest:
        raise SystemExit("evaluate: --manifest is required")
    tasks = read_eval_manifest(cfg.manifest, cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    args = [(t, cfg.hd_policy, cfg.min_voxels, cfg.auto_resample, cfg.rel_tol) for t in tasks]
    results = _pmap(_evaluate_one, args, cfg.workers)
    rows = []
    failed = 0
    for task, (m, err) in zip(tasks, results):
        if err:
            failed += 1
            log.error("case %s / %s failed: %s", task.case_id, task.model_id, err)
        else:
            rows.append(m)
    atomic_write_text(out / "metrics.csv", metrics_to_csv(rows))
    atomic_write_text(out / "metrics_summary.csv", evaluate_summary(rows))
    log.info("evaluated %d row(s), %d failed", len(rows), failed)
    return (1 if failed and cfg.strict else 0), rows


# --- stats / report ----------------------------------------------------------


def cmd_stats(cfg: RunConfig, rows: Iterable[CaseMetrics] | None = None) -> int:
    if rows is None:
        if not cfg.metrics:
            raise SystemExit("stats: --metrics is required")
        rows = read_metrics(cfg.metrics)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    res = run_study(rows, cfg.models)
    atomic_write_text(out / "study.json", study_json(res))
    text = render_tables(res)
    atomic_write_text(out / "tables.txt", text)
    print(text, end="")
    return 0


def cmd_report(cfg: RunConfig) -> int:
    code, rows = cmd_evaluate(cfg)
    return max(code, cmd_stats(cfg, rows))


def cmd_phantom(cfg: RunConfig, spec_path: str | None, n_cases: int | None) -> int:
    if spec_path:
        spec = load_study_spec(spec_path)
        if n_cases is not None:
            spec = replace(spec, n_cases=n_cases)
    else:
        spec = default_study_spec(n_cases or 50, cfg.seed)
    manifest = generate_study(spec, cfg.out)
    print(manifest)
    return 0


def cmd_cohort(cfg: RunConfig) -> int:
    if not cfg.manifest:
        raise SystemExit("cohort: --manifest is required")
    src = Path(cfg.manifest)
    with open(src, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        raw = list(reader)
    records = read_case_manifest(src)
    kept = {r.case_id for r in hz.balance_cohort(records, cfg.seed)}
    out = Path(cfg.out)
    if out.suffix != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "balanced_manifest.csv"
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    w.writeheader()
    w.writerows(row for row in raw if row["case_id"] in kept)
    atomic_write_text(out, buf.getvalue())
    print(out)
    return 0


# --- argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--manifest")
    common.add_argument("--out")
    common.add_argument("--recipe", help="harmonization recipe (default: bundled)")
    common.add_argument("--jobs", type=int, help="worker processes (default: all cores)")
    common.add_argument("--strict", action="store_true", default=None, help="nonzero exit on any case failure")
    common.add_argument("--seed", type=int)
    common.add_argument("--hd-policy", choices=[p.value for p in HDPolicy])
    common.add_argument("--min-voxels", type=int)
    common.add_argument("--rel-tol", type=float)
    common.add_argument("--auto-resample", action="store_true", default=None)
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="panceval", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    h = sub.add_parser("harmonize", parents=[common], help="build REF_8 / ALL_45 label volumes")
    h.add_argument("--schemes", help="comma-separated subset of REF_8,ALL_45")
    e = sub.add_parser("evaluate", parents=[common], help="per-case DSC / HD / detection")
    s = sub.add_parser("stats", parents=[common], help="Friedman, Nemenyi, Cochran's Q, McNemar")
    s.add_argument("--metrics", help="metrics.csv from evaluate")
    r = sub.add_parser("report", parents=[common], help="evaluate followed by stats")
    for q in (e, s, r):
        q.add_argument("--models", help="comma-separated model order for the tables")
    for q in (e, r):
        q.add_argument("--reference-code", type=int)
        q.add_argument("--prediction-code", action="append", default=[], metavar="MODEL=CODE")
    ph = sub.add_parser("phantom", parents=[common], help="generate a synthetic study")
    ph.add_argument("--spec", help="phantom study TOML (default: built-in three-model study)")
    ph.add_argument("--n-cases", type=int)
    sub.add_parser("cohort", parents=[common], help="balance PDAC / non-PDAC cases")
    return p


def config_from_args(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config)
    for key in ("manifest", "out", "recipe", "jobs", "strict", "seed", "hd_policy", "min_voxels", "rel_tol",
                "auto_resample", "reference_code", "metrics"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    if getattr(args, "schemes", None):
        cfg.schemes = tuple(s.strip() for s in args.schemes.split(","))
    if getattr(args, "models", None):
        cfg.models = tuple(s.strip() for s in args.models.split(","))
    for item in getattr(args, "prediction_code", []) or []:
        model, _, code = item.partition("=")
        if not code:
            raise SystemExit(f"--prediction-code expects MODEL=CODE, got {item!r}")
        cfg.prediction_codes[model] = int(code)
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    cfg = config_from_args(args)
    if args.command == "harmonize":
        return cmd_harmonize(cfg)
    if args.command == "evaluate":
        return cmd_evaluate(cfg)[0]
    if args.command == "stats":
        return cmd_stats(cfg)
    if args.command == "report":
        return cmd_report(cfg)
    if args.command == "phantom":
        return cmd_phantom(cfg, args.spec, args.n_cases)
    if args.command == "cohort":
        return cmd_cohort(cfg)
    raise AssertionError(args.command)


if __name__ == "__main__":
    sys.exit(main())
