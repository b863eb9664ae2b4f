"""Fishnet aggregation of building footprints to 100 m cell labels.

Grid convention: ``origin`` is the upper-left corner; row indices grow
southwards (decreasing y), column indices eastwards. Cell ``(r, c)`` covers
``x in [x0 + c*s, x0 + (c+1)*s]`` and ``y in [y0 - (r+1)*s, y0 - r*s]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

CELL_SIZE = 100.0

# filter reason codes
KEPT = 0
REJECT_HEIGHT_RANGE = 1
REJECT_FOOTPRINT = 2
REJECT_SLIVER = 3

H_MIN, H_MAX = 2.0, 500.0
LAMBDA_MIN = 0.01
SLIVER_LAMBDA, SLIVER_HEIGHT = 0.04, 20.0


@dataclass(frozen=True)
class FishnetGrid:
    x0: float
    y0: float
    rows: int
    cols: int
    cell_size: float = CELL_SIZE
    units: str = "m"

    def __post_init__(self):
        if not self.cell_size > 0:
            raise DataError(f"cell size must be positive, got {self.cell_size}")
        if self.rows < 1 or self.cols < 1:
            raise DataError(f"grid needs rows, cols >= 1, got {self.rows}x{self.cols}")

    def cell_bounds(self, row: int, col: int) -> tuple[float, float, float, float]:
        s = self.cell_size
        return (self.x0 + col * s, self.y0 - (row + 1) * s, self.x0 + (col + 1) * s, self.y0 - row * s)

    def translated(self, dx: float, dy: float) -> "FishnetGrid":
        return FishnetGrid(self.x0 + dx, self.y0 + dy, self.rows, self.cols, self.cell_size, self.units)


@dataclass
class BuildingPolygon:
    """A building footprint in projected metres; ``height`` NaN when unknown."""

    exterior: np.ndarray
    height: float = math.nan
    holes: list[np.ndarray] = field(default_factory=list)
    units: str = "m"

    def __post_init__(self):
        self.exterior = _open_ring(self.exterior)
        self.holes = [_open_ring(h) for h in self.holes]
        if self.height is None:
            self.height = math.nan
        self.height = float(self.height)

    @property
    def area(self) -> float:
        return abs(ring_area(self.exterior)) - sum(abs(ring_area(h)) for h in self.holes)

    def bounds(self) -> tuple[float, float, float, float]:
        x, y = self.exterior[:, 0], self.exterior[:, 1]
        return float(x.min()), float(y.min()), float(x.max()), float(y.max())

    def translated(self, dx: float, dy: float) -> "BuildingPolygon":
        off = np.array([dx, dy])
        return BuildingPolygon(self.exterior + off, self.height, [h + off for h in self.holes], self.units)


def _open_ring(ring) -> np.ndarray:
    ring = np.asarray(ring, dtype=np.float64)
    if ring.ndim != 2 or ring.shape[1] != 2:
        raise DataError(f"ring must be an (n, 2) coordinate array, got shape {ring.shape}")
    if len(ring) > 1 and np.array_equal(ring[0], ring[-1]):
        ring = ring[:-1]
    return ring


def ring_area(ring: np.ndarray) -> float:
    """Signed shoelace area (positive for counter-clockwise rings)."""
    if len(ring) < 3:
        return 0.0
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return int(v > 0) - int(v < 0)

    def on_seg(a, b, c):
        return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    if o1 == 0 and on_seg(p1, p2, q1):
        return True
    if o2 == 0 and on_seg(p1, p2, q2):
        return True
    if o3 == 0 and on_seg(q1, q2, p1):
        return True
    if o4 == 0 and on_seg(q1, q2, p2):
        return True
    return False


def is_simple(ring: np.ndarray) -> bool:
    """True when no two non-adjacent edges of the closed ring touch."""
    n = len(ring)
    if n < 3:
        return False
    pts = [tuple(p) for p in ring]
    for i in range(n):
        a1, a2 = pts[i], pts[(i + 1) % n]
        for j in range(i + 1, n):
            if (j + 1) % n == i or j == (i + 1) % n:
                continue
            if _segments_cross(a1, a2, pts[j], pts[(j + 1) % n]):
                return False
    return True


def validate_polygons(polygons: Sequence[BuildingPolygon], units: str = "m") -> None:
    for i, poly in enumerate(polygons):
        if poly.units != units:
            raise DataError(f"polygon {i}: units {poly.units!r} do not match grid units {units!r}")
        for ring in [poly.exterior, *poly.holes]:
            if not is_simple(ring):
                raise DataError(f"polygon {i}: ring is not simple (self-intersecting or degenerate)")
        if not poly.area > 0:
            raise DataError(f"polygon {i}: non-positive area")
        if not (math.isnan(poly.height) or poly.height > 0):
            raise DataError(f"polygon {i}: height must be positive or unknown, got {poly.height}")


# -- clipping ------------------------------------------------------------------

def clip_halfplane(ring: np.ndarray, nx: float, ny: float, c: float) -> np.ndarray:
    """Sutherland-Hodgman step: keep the part of ``ring`` with ``nx*x + ny*y <= c``."""
    n = len(ring)
    if n == 0:
        return ring
    out = []
    d = ring[:, 0] * nx + ring[:, 1] * ny - c
    for i in range(n):
        j = (i + 1) % n
        pi, pj, di, dj = ring[i], ring[j], d[i], d[j]
        if di <= 0:
            out.append(pi)
            if dj > 0:
                t = di / (di - dj)
                out.append(pi + t * (pj - pi))
        elif dj <= 0:
            t = di / (di - dj)
            out.append(pi + t * (pj - pi))
    if not out:
        return np.empty((0, 2))
    return np.asarray(out)


def clip_to_box(ring: np.ndarray, xmin: float, ymin: float, xmax: float, ymax: float) -> np.ndarray:
    ring = clip_halfplane(ring, 1.0, 0.0, xmax)
    ring = clip_halfplane(ring, -1.0, 0.0, -xmin)
    ring = clip_halfplane(ring, 0.0, 1.0, ymax)
    return clip_halfplane(ring, 0.0, -1.0, -ymin)


def intersection_area(poly: BuildingPolygon, box: tuple[float, float, float, float]) -> float:
    xmin, ymin, xmax, ymax = box
    bx0, by0, bx1, by1 = poly.bounds()
    if bx1 <= xmin or bx0 >= xmax or by1 <= ymin or by0 >= ymax:
        return 0.0
    if bx0 >= xmin and bx1 <= xmax and by0 >= ymin and by1 <= ymax:
        return poly.area
    area = abs(ring_area(clip_to_box(poly.exterior, *box)))
    for hole in poly.holes:
        area -= abs(ring_area(clip_to_box(hole, *box)))
    return max(area, 0.0)


def split_polygon(poly: BuildingPolygon, point, normal) -> tuple[BuildingPolygon, BuildingPolygon]:
    """Cut a hole-free polygon along the line through ``point`` with ``normal``."""
    if poly.holes:
        raise DataError("split_polygon does not support holes")
    nx, ny = normal
    c = nx * point[0] + ny * point[1]
    a = clip_halfplane(poly.exterior, nx, ny, c)
    b = clip_halfplane(poly.exterior, -nx, -ny, -c)
    return (BuildingPolygon(a, poly.height, units=poly.units), BuildingPolygon(b, poly.height, units=poly.units))


# -- aggregation -----------------------------------------------------------

@dataclass(frozen=True)
class CellLabel:
    row: int
    col: int
    lambda_p: float
    h_ave: float
    n_buildings: int


@dataclass
class LabelGrid:
    """Per-cell footprint ratio, mean height and building count."""

    grid: FishnetGrid
    lambda_p: np.ndarray
    h_ave: np.ndarray
    n_buildings: np.ndarray

    def cell(self, row: int, col: int) -> CellLabel:
        return CellLabel(row, col, float(self.lambda_p[row, col]), float(self.h_ave[row, col]),
                         int(self.n_buildings[row, col]))

    def __iter__(self):
        for r in range(self.grid.rows):
            for c in range(self.grid.cols):
                yield self.cell(r, c)


def aggregate(polygons: Sequence[BuildingPolygon], grid: FishnetGrid, validate: bool = True) -> LabelGrid:
    """Footprint ratio and area-weighted mean height per grid cell.

    Each building contributes its per-cell intersection area to every cell
    it overlaps. Buildings with unknown (NaN) height count toward the
    footprint ratio only.
    """
    if validate:
        validate_polygons(polygons, grid.units)
    rows, cols, s = grid.rows, grid.cols, grid.cell_size
    area = np.zeros((rows, cols))
    wsum = np.zeros((rows, cols))
    harea = np.zeros((rows, cols))
    count = np.zeros((rows, cols), dtype=np.int64)
    for poly in polygons:
        bx0, by0, bx1, by1 = poly.bounds()
        c0 = max(int(math.floor((bx0 - grid.x0) / s)), 0)
        c1 = min(int(math.ceil((bx1 - grid.x0) / s)), cols)
        r0 = max(int(math.floor((grid.y0 - by1) / s)), 0)
        r1 = min(int(math.ceil((grid.y0 - by0) / s)), rows)
        known = not math.isnan(poly.height)
        for r in range(r0, r1):
            for c in range(c0, c1):
                a = intersection_area(poly, grid.cell_bounds(r, c))
                if a <= 0.0:
                    continue
                area[r, c] += a
                count[r, c] += 1
                if known:
                    harea[r, c] += a
                    wsum[r, c] += a * poly.height
    lam = area / (s * s)
    with np.errstate(invalid="ignore", divide="ignore"):
        h = np.where(harea > 0, wsum / np.where(harea > 0, harea, 1.0), np.nan)
    return LabelGrid(grid, lam, h, count)


# -- plausibility filter -----------------------------------------------------

def filter_reason(h_ave, lambda_p):
    """Vectorised reason code: 0 kept, else the first violated rule (1..3).

    Rule 1: ``2.0 <= H <= 500.0`` (NaN heights fail). Rule 2:
    ``lambda > 0.01``. Rule 3: when ``lambda < 0.04`` require ``H < 20``.
    """
    h = np.asarray(h_ave, dtype=np.float64)
    lam = np.asarray(lambda_p, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        bad_h = ~((h >= H_MIN) & (h <= H_MAX))
        bad_l = ~(lam > LAMBDA_MIN)
        sliver = (lam < SLIVER_LAMBDA) & ~(h < SLIVER_HEIGHT)
    code = np.where(bad_h, REJECT_HEIGHT_RANGE, np.where(bad_l, REJECT_FOOTPRINT,
                                                          np.where(sliver, REJECT_SLIVER, KEPT)))
    return code if code.ndim else int(code)


@dataclass
class FilterResult:
    kept: list[CellLabel]
    rejected: list[tuple[CellLabel, int]]

    @property
    def kept_mask(self) -> set[tuple[int, int]]:
        return {(c.row, c.col) for c in self.kept}


def filter_samples(labels: Iterable[CellLabel] | LabelGrid) -> FilterResult:
    """Split cells into kept samples and rejections carrying a reason code.

    Cells without any building (NaN height, zero footprint) are rejected by
    rule 1 like any other implausible height.
    """
    cells = list(labels)
    if not cells:
        return FilterResult([], [])
    codes = filter_reason([c.h_ave for c in cells], [c.lambda_p for c in cells])
    kept = [c for c, k in zip(cells, codes) if k == KEPT]
    rejected = [(c, int(k)) for c, k in zip(cells, codes) if k != KEPT]
    return FilterResult(kept, rejected)


# -- NDJSON footprints -------------------------------------------------------

def read_footprints(path) -> list[BuildingPolygon]:
    """Read one GeoJSON ``Feature`` with ``Polygon`` geometry per line.

    ``properties.height`` (metres, may be null) and optional
    ``properties.units`` (default ``"m"``) are honoured; the first ring is
    the exterior, later rings are holes.
    """
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                geom = rec["geometry"]
                if geom["type"] != "Polygon":
                    raise DataError(f"line {lineno}: geometry type {geom['type']!r} is not Polygon")
                rings = geom["coordinates"]
                props = rec.get("properties") or {}
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed footprint record ({exc})") from None
            h = props.get("height")
            out.append(BuildingPolygon(np.asarray(rings[0], float), math.nan if h is None else float(h),
                                       [np.asarray(r, float) for r in rings[1:]], props.get("units", "m")))
    return out


def write_footprints(path, polygons: Sequence[BuildingPolygon]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in polygons:
            rings = [np.vstack([r, r[:1]]).tolist() for r in [p.exterior, *p.holes]]
            props = {"height": None if math.isnan(p.height) else p.height}
            if p.units != "m":
                props["units"] = p.units
            fh.write(json.dumps({"type": "Feature", "geometry": {"type": "Polygon", "coordinates": rings},
                                 "properties": props}) + "\n")

