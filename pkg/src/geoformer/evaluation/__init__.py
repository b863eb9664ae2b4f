"""Metrics, stratified error analysis, residual trimming and ablations."""

from .ablation import ABLATIONS, MODALITY, STRUCTURAL, AblationResult, AblationSpec, mean_predictor_rmse, run_ablation
from .metrics import METRIC_NAMES, NMAD_SCALE, MetricReport, metrics, nmad, r2_score
from .reports import (
    ablation_rows,
    ablation_table,
    read_reports_csv,
    rollup,
    write_reports_csv,
    write_reports_json,
)
from .stratify import H_EDGES, LP_EDGES, N_MIN, Stratum, TrimResult, n_trimmed, stratified, subset_mask, trim_outliers

__all__ = [
    "ABLATIONS", "MODALITY", "STRUCTURAL", "AblationResult", "AblationSpec", "mean_predictor_rmse", "run_ablation",
    "METRIC_NAMES", "NMAD_SCALE", "MetricReport", "metrics", "nmad", "r2_score",
    "ablation_rows", "ablation_table", "read_reports_csv", "rollup", "write_reports_csv", "write_reports_json",
    "H_EDGES", "LP_EDGES", "N_MIN", "Stratum", "TrimResult", "n_trimmed", "stratified", "subset_mask",
    "trim_outliers",
]
