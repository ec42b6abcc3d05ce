"""Pancreas segmentation evaluation: label harmonization, metrics and paired statistics."""

from .harmonize import balance_cohort, build_all45, build_ref8
from .metrics import CaseMetrics, HDPolicy, dice, evaluate_case, hausdorff
from .nifti import read_label_volume, write_label_volume
from .stats import run_study
from .volume import GridSpec, LabelVolume

__version__ = "0.1.0"

__all__ = [
    "CaseMetrics",
    "GridSpec",
    "HDPolicy",
    "LabelVolume",
    "balance_cohort",
    "build_all45",
    "build_ref8",
    "dice",
    "evaluate_case",
    "hausdorff",
    "read_label_volume",
    "run_study",
    "write_label_volume",
]
