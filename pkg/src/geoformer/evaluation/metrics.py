"""Regression metrics on residuals ``pred - target``."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import DataError

NMAD_SCALE = 1.4826
METRIC_NAMES = ("rmse", "mae", "me", "nmad", "cc", "r2")


@dataclass
class MetricReport:
    rmse: float
    mae: float
    me: float
    nmad: float
    cc: float
    r2: float
    n: int
    task: str = ""
    model: str = ""
    stratum: str = "all"
    flags: list = field(default_factory=list)

    def as_row(self) -> dict:
        d = asdict(self)
        d["flags"] = ";".join(self.flags)
        return d

    @classmethod
    def empty(cls, task="", model="", stratum="all", flags=()) -> "MetricReport":
        nan = math.nan
        return cls(nan, nan, nan, nan, nan, nan, 0, task, model, stratum, list(flags))


def _clean(preds, targets) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise DataError(f"prediction/target length mismatch: {p.size} vs {t.size}")
    if p.size < 2:
        raise DataError(f"metrics need at least 2 samples, got {p.size}")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(t))):
        raise DataError("non-finite predictions or targets")
    return p, t


def nmad(residuals) -> float:
    r = np.asarray(residuals, dtype=np.float64)
    return float(NMAD_SCALE * np.median(np.abs(r - np.median(r))))


def r2_score(preds, targets) -> float:
    p, t = _clean(preds, targets)
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0.0:
        return math.nan
    return 1.0 - float(np.sum((p - t) ** 2)) / ss_tot


def metrics(preds, targets, task: str = "", model: str = "", stratum: str = "all") -> MetricReport:
    """RMSE, MAE, ME, NMAD, Pearson CC and R^2.

    With zero target variance CC and R^2 are NaN and flagged; with zero
    prediction variance only CC is.
    """
    p, t = _clean(preds, targets)
    r = p - t
    flags = []
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    pc, tc = p - p.mean(), t - t.mean()
    denom = math.sqrt(float(np.sum(pc * pc)) * ss_tot)
    if ss_tot == 0.0:
        flags.append("zero_target_variance")
        r2 = math.nan
    else:
        r2 = 1.0 - float(np.sum(r * r)) / ss_tot
    if denom == 0.0:
        if "zero_target_variance" not in flags:
            flags.append("zero_prediction_variance")
        cc = math.nan
    else:
        cc = float(np.clip(np.sum(pc * tc) / denom, -1.0, 1.0))
    return MetricReport(
        rmse=float(np.sqrt(np.mean(r * r))),
        mae=float(np.mean(np.abs(r))),
        me=float(np.mean(r)),
        nmad=nmad(r),
        cc=cc,
        r2=r2,
        n=int(p.size),
        task=task,
        model=model,
        stratum=stratum,
        flags=flags,
    )
