"""Error analysis over (H_ave, lambda_p) bins and top-residual trimming."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from ..errors import ConfigError, DataError
from .metrics import MetricReport, metrics

H_EDGES = (0.0, 10.0, 20.0, 30.0, 50.0, math.inf)
LP_EDGES = (0.0, 0.1, 0.25, 0.5, 0.7, 1.0)
N_MIN = 30


@dataclass(frozen=True)
class Stratum:
    """Half-open ``[lo, hi)`` in both axes; a finite top edge is closed."""

    h_lo: float
    h_hi: float
    lp_lo: float
    lp_hi: float

    @property
    def id(self) -> str:
        return f"h[{_fmt(self.h_lo)},{_fmt(self.h_hi)})|lp[{_fmt(self.lp_lo)},{_fmt(self.lp_hi)})"


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:g}"


def _check_edges(edges: Sequence[float], name: str) -> np.ndarray:
    e = np.asarray(edges, dtype=np.float64)
    if e.ndim != 1 or e.size < 2 or np.any(np.isnan(e)) or np.any(np.diff(e) <= 0):
        raise ConfigError(f"{name} edges must be strictly increasing with at least two values")
    return e


def _bin_index(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Bin per value, -1 outside; the last bin includes a finite upper edge."""
    idx = np.searchsorted(edges, values, side="right") - 1
    idx[(values == edges[-1]) & np.isfinite(edges[-1])] = len(edges) - 2
    idx[(idx < 0) | (idx > len(edges) - 2)] = -1
    return idx


def _labels(samples) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(samples, tuple) and len(samples) == 2:
        h, lp = samples
    else:
        h = [s.h_ave for s in samples]
        lp = [s.lambda_p for s in samples]
    return np.asarray(h, dtype=np.float64).ravel(), np.asarray(lp, dtype=np.float64).ravel()


def stratified(preds, targets, samples, h_edges=H_EDGES, lp_edges=LP_EDGES, n_min: int = N_MIN,
               task: str = "", model: str = "") -> list[MetricReport]:
    """One report per (H_ave, lambda_p) bin, row-major over height then density.

    ``samples`` supplies the stratifying labels, either as Sample objects or
    as an ``(h_ave, lambda_p)`` pair of arrays. Bins with fewer than
    ``n_min`` members carry a ``sparse`` flag; bins with fewer than two
    have NaN metrics.
    """
    he = _check_edges(h_edges, "H_ave")
    le = _check_edges(lp_edges, "lambda_p")
    p = np.asarray(preds, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    h, lp = _labels(samples)
    if not (p.size == t.size == h.size == lp.size):
        raise DataError("preds, targets and stratifying labels differ in length")
    hi, li = _bin_index(h, he), _bin_index(lp, le)
    out = []
    for a in range(len(he) - 1):
        for b in range(len(le) - 1):
            st = Stratum(float(he[a]), float(he[a + 1]), float(le[b]), float(le[b + 1]))
            sel = (hi == a) & (li == b)
            n = int(sel.sum())
            flags = ["sparse"] if n < n_min else []
            if n < 2:
                rep = MetricReport.empty(task, model, st.id, flags)
                rep.n = n
            else:
                rep = metrics(p[sel], t[sel], task, model, st.id)
                rep.flags = flags + rep.flags
            out.append(rep)
    return out


def subset_mask(samples, h_range=(5.0, 15.0), lp_range=(0.01, 0.5)) -> np.ndarray:
    """Boolean selector for ``h_lo <= H_ave < h_hi`` and ``lp_lo <= lambda_p < lp_hi``."""
    h, lp = _labels(samples)
    return (h >= h_range[0]) & (h < h_range[1]) & (lp >= lp_range[0]) & (lp < lp_range[1])


@dataclass
class TrimResult:
    kept: np.ndarray
    dropped: np.ndarray
    before: MetricReport
    after: MetricReport


def n_trimmed(n: int, q: float) -> int:
    # exact decimal arithmetic so 0.001 * 1000 is 1, not 1 + ulp
    return math.ceil(Fraction(repr(float(q))) * n)


def trim_outliers(preds, targets, q: float = 0.001, task: str = "", model: str = "") -> TrimResult:
    """Drop the ``ceil(q * n)`` largest absolute residuals and re-score.

    Equal residuals are dropped lowest index first; ``kept`` stays in input order.
    """
    if not 0.0 < q < 0.5:
        raise ConfigError(f"trim fraction must lie in (0, 0.5), got {q}")
    p = np.asarray(preds, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    before = metrics(p, t, task, model, "all")
    m = n_trimmed(p.size, q)
    order = np.argsort(-np.abs(p - t), kind="stable")
    dropped = np.sort(order[:m])
    kept = np.sort(order[m:])
    after = metrics(p[kept], t[kept], task, model, f"trimmed_q{q:g}")
    return TrimResult(kept, dropped, before, after)
