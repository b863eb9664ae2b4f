"""Radial-sector train/val/test partitioning, boundary purging and ring statistics.

Each city is cut into ten equal-angle sectors around its urban core. Whole
sectors are assigned to splits, so every split spans core and periphery
while neighbouring cells of different splits only meet along sector rays.
Training cells whose context window reaches across such a ray are purged.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset_store.context import ContextBuilder
from .dataset_store.types import CHANNELS, PX, CityStack, NormStats, Sample
from .errors import DataError
from .grid_labeling import CELL_SIZE, FishnetGrid
from .seeding import rng_for

N_SECTORS = 10
SECTOR_DEG = 360.0 / N_SECTORS
SPLIT_ORDER = ("train", "val", "test")
# raster codes for split territories; 0 is reserved for "no territory"/padding
SPLIT_CODE = {"train": 1, "val": 2, "test": 3}


@dataclass(frozen=True)
class SectorAssignment:
    city: str
    sector: int
    theta0: float  # degrees, counter-clockwise from east
    theta1: float
    split: str
    count: int


@dataclass
class CitySplit:
    """Sector geometry and split assignment for one city."""

    city: str
    center: tuple[float, float]
    offset_deg: float
    assignments: list[SectorAssignment] = field(default_factory=list)

    def sector_of(self, row, col):
        """Sector id for cell centre(s); the core cell itself maps to the sector at angle 0."""
        dr = np.asarray(row, dtype=np.float64) - self.center[0]
        dc = np.asarray(col, dtype=np.float64) - self.center[1]
        theta = np.degrees(np.arctan2(-dr, dc))  # rows grow southward
        theta = np.mod(theta - self.offset_deg, 360.0)
        return np.minimum((theta // SECTOR_DEG).astype(np.int64), N_SECTORS - 1)

    def split_of_sector(self) -> dict[int, str]:
        return {a.sector: a.split for a in self.assignments}

    def territory(self, rows: int, cols: int) -> np.ndarray:
        """``(rows, cols)`` int8 raster of split codes covering every grid cell."""
        rr, cc = np.indices((rows, cols))
        sec = self.sector_of(rr, cc)
        lut = np.zeros(N_SECTORS, dtype=np.int8)
        for s, name in self.split_of_sector().items():
            lut[s] = SPLIT_CODE[name]
        return lut[sec]

    def apply(self, samples: Sequence[Sample]) -> list[Sample]:
        lut = self.split_of_sector()
        out = []
        for s in samples:
            if s.city != self.city:
                out.append(s)
            else:
                out.append(s.with_split(lut[int(self.sector_of(s.row, s.col))]))
        return out

    def fractions(self) -> dict[str, float]:
        total = sum(a.count for a in self.assignments)
        return {n: sum(a.count for a in self.assignments if a.split == n) / total for n in SPLIT_ORDER}


@dataclass(frozen=True)
class RingStats:
    lo: float  # metres
    hi: float
    count: int
    bh_mean: float
    bh_std: float
    bf_mean: float
    bf_std: float


def _city_samples(samples: Sequence[Sample]) -> tuple[str, list[Sample]]:
    cities = {s.city for s in samples}
    if len(cities) > 1:
        raise DataError(f"expected samples of one city, got {sorted(cities)}")
    if not samples:
        raise DataError("city has no valid samples")
    return next(iter(cities)), list(samples)


def find_core(samples: Sequence[Sample]) -> tuple[float, float]:
    """Footprint-ratio-weighted centroid ``(row, col)`` of the valid cells."""
    _, samples = _city_samples(samples)
    w = np.array([s.lambda_p for s in samples], dtype=np.float64)
    r = np.array([s.row for s in samples], dtype=np.float64)
    c = np.array([s.col for s in samples], dtype=np.float64)
    if not w.sum() > 0:
        w = np.ones_like(w)
    return float((w * r).sum() / w.sum()), float((w * c).sum() / w.sum())


def assign_sectors(counts: Sequence[int], ratios: Sequence[float]) -> list[str]:
    """Assign sectors (given by count) to splits by largest remaining deficit.

    Deficits are exact fractions so ties resolve by the documented order
    (train, val, test) rather than by rounding. Empty sectors hold no
    samples and go to train, which keeps their area out of the purge.
    """
    total = sum(counts)
    targets = [Fraction(x).limit_denominator(10**6) for x in ratios]
    norm = sum(targets)
    targets = [t / norm for t in targets]
    got = [0, 0, 0]
    n_sectors = [0, 0, 0]
    order = sorted((i for i in range(len(counts)) if counts[i] > 0), key=lambda i: (-counts[i], i))
    left = len(order)
    out = ["train"] * len(counts)
    for i in order:
        choices = [0, 1, 2]
        empty = [j for j in choices if n_sectors[j] == 0]
        if empty and left <= len(empty):
            choices = empty
        deficit = [targets[j] - Fraction(got[j], total) for j in choices]
        best = choices[max(range(len(choices)), key=lambda m: (deficit[m], -choices[m]))]
        out[i] = SPLIT_ORDER[best]
        got[best] += counts[i]
        n_sectors[best] += 1
        left -= 1
    return out


def split_city(samples: Sequence[Sample], ratios=(0.8, 0.1, 0.1), seed: int | None = None,
               center: tuple[float, float] | None = None) -> CitySplit:
    """Assign the ten radial sectors of one city to train/val/test.

    ``seed`` rotates the sector fan by a derived offset in ``[0, 36)``
    degrees; ``None`` keeps the first ray pointing east.
    """
    city, samples = _city_samples(samples)
    if len(ratios) != 3 or min(ratios) < 0 or not sum(ratios) > 0:
        raise DataError(f"ratios must be three non-negative numbers, got {ratios}")
    if len(samples) < N_SECTORS:
        raise DataError(f"{city}: {len(samples)} samples; at least {N_SECTORS} are needed for a sector split")
    center = center if center is not None else find_core(samples)
    offset = 0.0 if seed is None else float(rng_for(seed, f"geosplit:{city}").uniform(0.0, SECTOR_DEG))
    cs = CitySplit(city, center, offset)
    sec = cs.sector_of([s.row for s in samples], [s.col for s in samples])
    counts = np.bincount(sec, minlength=N_SECTORS).tolist()
    if sum(1 for x in counts if x > 0) < 3:
        raise DataError(f"{city}: fewer than 3 non-empty sectors; split this city manually")
    names = assign_sectors(counts, ratios)
    cs.assignments = [
        SectorAssignment(city, i, offset + i * SECTOR_DEG, offset + (i + 1) * SECTOR_DEG,
                         names[i], int(counts[i]))
        for i in range(N_SECTORS)
    ]
    return cs


def split_all(samples: Sequence[Sample], ratios=(0.8, 0.1, 0.1), seed: int | None = None) -> dict[str, CitySplit]:
    by_city: dict[str, list[Sample]] = {}
    for s in samples:
        by_city.setdefault(s.city, []).append(s)
    return {c: split_city(v, ratios, seed) for c, v in sorted(by_city.items())}


def _dilate(mask: np.ndarray, h: int) -> np.ndarray:
    if h == 0:
        return mask.copy()
    R, C = mask.shape
    p = np.pad(mask, h)
    out = np.zeros_like(mask)
    for dr in range(2 * h + 1):
        for dc in range(2 * h + 1):
            out |= p[dr:dr + R, dc:dc + C]
    return out


def _territory_from_samples(samples: Sequence[Sample], rows: int, cols: int) -> np.ndarray:
    t = np.zeros((rows, cols), dtype=np.int8)
    for s in samples:
        if s.split in SPLIT_CODE:
            t[s.row, s.col] = SPLIT_CODE[s.split]
    return t


def purge_boundary(samples: Sequence[Sample], k: int,
                   territories: Mapping[str, np.ndarray] | None = None,
                   dims: Mapping[str, tuple[int, int]] | None = None) -> list[Sample]:
    """Re-tag training samples whose k x k window touches val/test territory.

    ``territories`` maps city -> split-code raster (see
    :meth:`CitySplit.territory`); without it, territory is read off the
    samples' own tags (needs ``dims``, or the sample extent is used).
    """
    if k < 1 or k % 2 == 0:
        raise DataError(f"context size k must be a positive odd integer, got {k}")
    h = k // 2
    by_city: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        by_city.setdefault(s.city, []).append(i)
    out = list(samples)
    for city, idx in by_city.items():
        if territories is not None and city in territories:
            terr = np.asarray(territories[city])
        else:
            if dims is not None and city in dims:
                R, C = dims[city]
            else:
                R = max(samples[i].row for i in idx) + 1
                C = max(samples[i].col for i in idx) + 1
            terr = _territory_from_samples([samples[i] for i in idx], R, C)
        reach = _dilate((terr == SPLIT_CODE["val"]) | (terr == SPLIT_CODE["test"]), h)
        for i in idx:
            s = samples[i]
            if s.split == "train" and reach[s.row, s.col]:
                out[i] = s.with_split("purged")
    return out


def audit_leakage(samples: Sequence[Sample], k: int, territories: Mapping[str, np.ndarray]) -> int:
    """Count training-context pixels lying in val/test territory.

    Independent of :func:`purge_boundary`: the territory raster is painted
    into a pixel stack and pushed through the real context assembler.
    """
    stacks = []
    for city, terr in territories.items():
        R, C = terr.shape
        px = np.repeat(np.repeat(terr.astype(np.float32), PX, 0), PX, 1)
        zeros = np.zeros((R, C), np.float32)
        stacks.append(CityStack(city, 0, FishnetGrid(0.0, R * CELL_SIZE, R, C),
                                np.broadcast_to(px, (len(CHANNELS), PX * R, PX * C)).copy(),
                                zeros, zeros, np.zeros((R, C), bool)))
    builder = ContextBuilder(stacks, NormStats.identity(), k)
    leaked = 0
    for s in samples:
        if s.split == "train":
            ctx = builder.one(s.city, s.row, s.col)[0]
            leaked += int(np.count_nonzero(ctx >= SPLIT_CODE["val"]))
    return leaked


def ring_stats(samples: Sequence[Sample], center: tuple[float, float], band: float = 1000.0,
               n_bands: int = 5, cell_size: float = CELL_SIZE) -> list[RingStats]:
    """Per-band mean/std (population) of BH and BF by cell-centre distance."""
    r = np.array([s.row for s in samples], dtype=np.float64)
    c = np.array([s.col for s in samples], dtype=np.float64)
    bh = np.array([s.h_ave for s in samples], dtype=np.float64)
    bf = np.array([s.lambda_p for s in samples], dtype=np.float64)
    d = cell_size * np.hypot(r - center[0], c - center[1])
    out = []
    for b in range(n_bands):
        lo, hi = b * band, (b + 1) * band
        m = (d >= lo) & (d < hi)
        n = int(m.sum())
        if n == 0:
            out.append(RingStats(lo, hi, 0, math.nan, math.nan, math.nan, math.nan))
        else:
            out.append(RingStats(lo, hi, n, float(bh[m].mean()), float(bh[m].std()),
                                 float(bf[m].mean()), float(bf[m].std())))
    return out


MANIFEST_COLUMNS = ("city", "row", "col", "sector", "split")


def write_split_manifest(path, samples: Sequence[Sample], splits: Mapping[str, CitySplit]) -> Path:
    """CSV ``city,row,col,sector,split`` sorted by (city, row, col)."""
    path = Path(path)
    rows = sorted(samples, key=lambda s: (s.city, s.row, s.col))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for s in rows:
            w.writerow([s.city, s.row, s.col, int(splits[s.city].sector_of(s.row, s.col)), s.split])
    return path


def read_split_manifest(path) -> dict[tuple[str, int, int], tuple[int, str]]:
    path = Path(path)
    out = {}
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
                raise DataError(f"{path}: expected columns {','.join(MANIFEST_COLUMNS)}")
            for rec in reader:
                if rec["split"] not in ("train", "val", "test", "purged"):
                    raise DataError(f"{path}: unknown split {rec['split']!r}")
                out[(rec["city"], int(rec["row"]), int(rec["col"]))] = (int(rec["sector"]), rec["split"])
    except FileNotFoundError:
        raise DataError(f"{path}: split manifest not found") from None
    return out


def apply_split_manifest(samples: Sequence[Sample], manifest: Mapping[tuple[str, int, int], tuple[int, str]]) -> list[Sample]:
    out = []
    for s in samples:
        key = (s.city, s.row, s.col)
        if key not in manifest:
            raise DataError(f"sample {key} missing from split manifest")
        out.append(s.with_split(manifest[key][1]))
    return out


def geosplit(stacks: Sequence[CityStack], samples: Sequence[Sample], ratios=(0.8, 0.1, 0.1),
             seed: int | None = None, k: int = 1) -> tuple[list[Sample], dict[str, CitySplit]]:
    """Sector-split every city, then purge training cells for context size ``k``."""
    splits = split_all(samples, ratios, seed)
    tagged = list(samples)
    for cs in splits.values():
        tagged = cs.apply(tagged)
    terr = {s.city: splits[s.city].territory(s.rows, s.cols) for s in stacks if s.city in splits}
    return purge_boundary(tagged, k, terr), splits
