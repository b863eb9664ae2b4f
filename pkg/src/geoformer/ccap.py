"""Percolation-style urban clustering on predicted BF/BH grids.

Each candidate footprint threshold gives a binary urban mask
(``bf >= lam`` and ``bh >= bh_floor``); its connected clusters define a
probability distribution whose Shannon entropy is maximised over the
candidates. The chosen mask then restricts pre/post-event comparisons.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError

PROBABILITIES = ("area", "size_histogram")


@dataclass(frozen=True)
class CcapConfig:
    lam_lo: float = 0.005
    lam_hi: float = 0.15
    n_steps: int = 30
    bh_floor: float = 5.0
    connectivity: int = 4
    penalty: float = 0.0
    probabilities: str = "area"

    def __post_init__(self):
        if not self.lam_lo < self.lam_hi:
            raise ConfigError(f"threshold range needs low < high, got [{self.lam_lo}, {self.lam_hi}]")
        if self.n_steps < 2:
            raise ConfigError("n_steps must be >= 2")
        if self.connectivity not in (4, 8):
            raise ConfigError("connectivity must be 4 or 8")
        if self.probabilities not in PROBABILITIES:
            raise ConfigError(f"probabilities must be one of {PROBABILITIES}")

    @property
    def candidates(self) -> np.ndarray:
        return np.linspace(self.lam_lo, self.lam_hi, self.n_steps)

    @classmethod
    def from_dict(cls, d: dict) -> "CcapConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown ccap option(s) {sorted(unknown)}")
        return cls(**d)


# -- labeling ------------------------------------------------------------------------

def _runs(row: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Start (inclusive) and stop (exclusive) columns of the True runs in a row."""
    d = np.diff(np.concatenate(([0], row.view(np.int8), [0])))
    return np.flatnonzero(d == 1), np.flatnonzero(d == -1)


def label(mask, connectivity: int = 4) -> tuple[np.ndarray, int]:
    """Connected components, numbered 1.. in raster order of first pixel.

    Works on horizontal runs: a run joins each run of the previous row whose
    columns overlap (4-connectivity) or touch diagonally (8-connectivity).
    """
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise DataError(f"mask must be 2-D, got shape {m.shape}")
    reach = 0 if connectivity == 4 else 1
    parent: list[int] = []

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    runs = []  # (row, start, stop, run id)
    prev: list[tuple[int, int, int]] = []
    for r in range(m.shape[0]):
        starts, stops = _runs(m[r])
        cur = []
        j = 0
        for s, e in zip(starts.tolist(), stops.tolist()):
            rid = len(parent)
            parent.append(rid)
            while j < len(prev) and prev[j][1] + reach <= s:
                j += 1
            jj = j
            while jj < len(prev) and prev[jj][0] < e + reach:
                a, b = find(prev[jj][2]), find(rid)
                if a != b:
                    parent[max(a, b)] = min(a, b)
                jj += 1
            cur.append((s, e, rid))
            runs.append((r, s, e, rid))
        prev = cur
    out = np.zeros(m.shape, dtype=np.int64)
    ids: dict[int, int] = {}
    for r, s, e, rid in runs:
        root = find(rid)
        if root not in ids:
            ids[root] = len(ids) + 1
        out[r, s:e] = ids[root]
    return out, len(ids)


def cluster_sizes(mask, connectivity: int = 4) -> np.ndarray:
    lab, n = label(mask, connectivity)
    return np.bincount(lab.ravel(), minlength=n + 1)[1:]


def entropy(sizes, probabilities: str = "area", base: float = math.e) -> float:
    """Shannon entropy of a cluster-size distribution; 0 for one cluster.

    ``area`` weights each cluster by its cell count; ``size_histogram`` uses
    the normalised histogram of distinct sizes. Terms are summed in sorted
    order so the value does not depend on label order.
    """
    s = np.asarray(sizes, dtype=np.int64)
    s = s[s > 0]
    if s.size == 0:
        return math.nan
    if probabilities == "area":
        w = s
    elif probabilities == "size_histogram":
        w = np.array(sorted(Counter(s.tolist()).values()), dtype=np.int64)
    else:
        raise ConfigError(f"unknown probabilities {probabilities!r}")
    total = int(w.sum())
    p = sorted(int(v) / total for v in w)
    h = -math.fsum(q * math.log(q) for q in p)
    return h / math.log(base) if base != math.e else h


# -- threshold selection -------------------------------------------------------------

def urban_mask(bf, bh, lam: float, bh_floor: float = 5.0) -> np.ndarray:
    return (np.asarray(bf) >= lam) & (np.asarray(bh) >= bh_floor)


@dataclass
class CcapResult:
    lam_star: float
    candidates: list
    entropies: list
    scores: list
    mask: np.ndarray = field(repr=False)
    n_clusters: int = 0
    size_hist: dict = field(default_factory=dict)

    @property
    def mask_fraction(self) -> float:
        return float(self.mask.mean())

    def summary(self) -> dict:
        nan = lambda v: None if isinstance(v, float) and math.isnan(v) else v
        return {
            "lambda_star": self.lam_star,
            "candidates": [float(c) for c in self.candidates],
            "entropies": [nan(float(e)) for e in self.entropies],
            "scores": [nan(float(s)) for s in self.scores],
            "n_clusters": self.n_clusters,
            "size_histogram": {str(k): v for k, v in sorted(self.size_hist.items())},
            "mask_cells": int(self.mask.sum()),
            "mask_fraction": self.mask_fraction,
        }


def _check_grids(bf, bh) -> tuple[np.ndarray, np.ndarray]:
    bf = np.asarray(bf, dtype=np.float64)
    bh = np.asarray(bh, dtype=np.float64)
    if bf.shape != bh.shape or bf.ndim != 2:
        raise DataError(f"BF and BH grids must be 2-D and equal in shape, got {bf.shape} and {bh.shape}")
    if not (np.all(np.isfinite(bf)) and np.all(np.isfinite(bh))):
        raise DataError("BF/BH grids contain non-finite values")
    if bf.size and (bf.min() < 0 or bf.max() > 1):
        raise DataError("BF values must lie in [0, 1]")
    return bf, bh


def select_threshold(bf, bh, cfg: CcapConfig = CcapConfig()) -> CcapResult:
    """Pick the candidate maximising ``entropy - penalty * mask_fraction``.

    Candidates with an empty mask are skipped; ties go to the smallest threshold.
    """
    bf, bh = _check_grids(bf, bh)
    cands = cfg.candidates
    ents, scores = [], []
    best, best_i = -math.inf, -1
    for i, lam in enumerate(cands):
        m = urban_mask(bf, bh, lam, cfg.bh_floor)
        if not m.any():
            ents.append(math.nan)
            scores.append(math.nan)
            continue
        h = entropy(cluster_sizes(m, cfg.connectivity), cfg.probabilities)
        sc = h - cfg.penalty * float(m.mean()) if cfg.penalty else h
        ents.append(h)
        scores.append(sc)
        if sc > best:
            best, best_i = sc, i
    if best_i < 0:
        raise DataError("no urban area: every candidate threshold gives an empty mask")
    lam = float(cands[best_i])
    mask = urban_mask(bf, bh, lam, cfg.bh_floor)
    sizes = cluster_sizes(mask, cfg.connectivity)
    return CcapResult(lam, [float(c) for c in cands], ents, scores, mask, int(sizes.size),
                      dict(Counter(int(s) for s in sizes)))


# -- event comparison ----------------------------------------------------------------

def disc(shape, center, radius_m: float, cell_size: float = 100.0) -> np.ndarray:
    """Cells whose centres lie within ``radius_m`` of the centre cell's centre."""
    rr, cc = np.indices(shape)
    d2 = ((rr - center[0]) ** 2 + (cc - center[1]) ** 2) * float(cell_size) ** 2
    return d2 <= float(radius_m) ** 2


@dataclass
class EventRow:
    city: str
    n_before: int
    n_after: int
    bf_before: float
    bf_after: float
    bh_before: float
    bh_after: float
    lam_before: float = math.nan
    lam_after: float = math.nan

    @property
    def d_bf(self) -> float:
        return self.bf_after - self.bf_before

    @property
    def d_bh(self) -> float:
        return self.bh_after - self.bh_before

    @property
    def bf_change_pct(self) -> float:
        return 100.0 * self.d_bf / self.bf_before if self.bf_before else math.nan


def _masked_means(bf, bh, mask, what: str, city: str) -> tuple[int, float, float]:
    n = int(mask.sum())
    if n == 0:
        raise DataError(f"{city}: empty masked region {what} the event")
    return n, float(bf[mask].mean()), float(bh[mask].mean())


def event_compare(pre, post, center, radius: float = 1500.0, cfg: CcapConfig = CcapConfig(),
                  city: str = "", cell_size: float = 100.0) -> EventRow:
    """Mean BF and BH inside each epoch's own urban mask within ``radius`` metres."""
    bf0, bh0 = _check_grids(*pre)
    bf1, bh1 = _check_grids(*post)
    if bf0.shape != bf1.shape:
        raise DataError(f"{city}: pre/post grids are not aligned ({bf0.shape} vs {bf1.shape})")
    near = disc(bf0.shape, center, radius, cell_size)
    r0 = select_threshold(bf0, bh0, cfg)
    r1 = select_threshold(bf1, bh1, cfg)
    n0, mbf0, mbh0 = _masked_means(bf0, bh0, r0.mask & near, "before", city)
    n1, mbf1, mbh1 = _masked_means(bf1, bh1, r1.mask & near, "after", city)
    return EventRow(city, n0, n1, mbf0, mbf1, mbh0, mbh1, r0.lam_star, r1.lam_star)


def overall(rows: Sequence[EventRow]) -> EventRow:
    """Cell-count weighted aggregate across cities."""
    if not rows:
        raise DataError("no cities to aggregate")
    n0 = sum(r.n_before for r in rows)
    n1 = sum(r.n_after for r in rows)
    w = lambda attr, n, key: math.fsum(getattr(r, attr) * getattr(r, key) for r in rows) / n
    return EventRow("Overall", n0, n1, w("bf_before", n0, "n_before"), w("bf_after", n1, "n_after"),
                    w("bh_before", n0, "n_before"), w("bh_after", n1, "n_after"))


EVENT_COLUMNS = ("City", "BF Before", "BF After", "BH Before", "BH After")


def event_table(rows: Sequence[EventRow]) -> list[list[str]]:
    """Rows in the per-city layout plus the overall row (BF to 4, BH to 2 decimals)."""
    out = [list(EVENT_COLUMNS)]
    for r in [*rows, overall(rows)]:
        out.append([r.city, f"{r.bf_before:.4f}", f"{r.bf_after:.4f}", f"{r.bh_before:.2f}", f"{r.bh_after:.2f}"])
    return out


def write_event_csv(path, rows: Sequence[EventRow]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        for line in event_table(rows):
            w.writerow(line)
    return path


def write_event_json(path, rows: Sequence[EventRow]) -> Path:
    path = Path(path)
    doc = []
    for r in [*rows, overall(rows)]:
        d = asdict(r)
        d.update(d_bf=r.d_bf, d_bh=r.d_bh, bf_change_pct=r.bf_change_pct)
        doc.append({k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()})
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


# -- mask export ---------------------------------------------------------------------

def write_mask_pgm(path, mask) -> Path:
    """Binary PGM (P5), one byte per cell, 255 urban / 0 otherwise."""
    m = np.asarray(mask, dtype=bool)
    path = Path(path)
    with path.open("wb") as f:
        f.write(f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode("ascii"))
        f.write((m.astype(np.uint8) * 255).tobytes())
    return path


def read_mask_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise DataError(f"{path}: not a binary 8-bit PGM written by this tool")
    w, h = (int(v) for v in parts[1].split())
    body = np.frombuffer(parts[3], dtype=np.uint8)
    if body.size != w * h:
        raise DataError(f"{path}: expected {w * h} cells, found {body.size}")
    return body.reshape(h, w) > 0


def write_ccap_outputs(out_dir, result: CcapResult, cfg: CcapConfig) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pgm = write_mask_pgm(out_dir / "ccap_mask.pgm", result.mask)
    summ = result.summary()
    summ["config"] = asdict(cfg)
    js = out_dir / "ccap_summary.json"
    js.write_text(json.dumps(summ, indent=1, sort_keys=True) + "\n")
    return pgm, js
