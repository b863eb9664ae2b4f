"""Seeded synthetic cities for desk-scale end-to-end runs.

Each city has a latent built-up intensity per 100 m cell: a radial decay
from the core plus smooth and cell-level random components. Labels follow
from the intensity, with building height also driven by the 3 x 3
neighbourhood mean intensity (information only visible through context).
Explanatory channels are noisy functions of the labels:

* optical bands respond to the footprint ratio plus per-pixel material noise,
* SAR responds to height x footprint (a double-bounce proxy) plus additive
  speckle whose spread does not depend on the signal,
* DEM is low-frequency terrain generated at 30 m and resampled to 10 m.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import DataError
from ..grid_labeling import KEPT, FishnetGrid, filter_reason
from ..seeding import rng_for
from .types import CHANNELS, PX, CityStack


@dataclass(frozen=True)
class SynthParams:
    decay_km: float = 2.5          # e-folding distance of the radial intensity
    smooth_sd: float = 0.10        # amplitude of the spatially smooth component
    smooth_cells: float = 3.0      # Gaussian length scale of that component (cells)
    cell_sd: float = 0.30          # amplitude of the cell-level component
    bf_base: float = 0.03
    bf_gain: float = 0.21
    bf_noise: float = 0.015
    bh_base: float = 3.0
    bh_self: float = 2.0           # height response to the cell's own intensity
    bh_context: float = 9.0        # height response to the 3x3 mean intensity
    bh_dem: float = 0.6            # height response to standardised terrain
    bh_noise: float = 0.8
    optical_noise: float = 0.03    # per-pixel reflectance noise
    sar_noise: float = 4.0         # per-pixel additive speckle
    dem_relief: float = 40.0       # metres
    core_jitter_cells: float = 2.0

    def check(self) -> None:
        for name in ("decay_km", "smooth_cells", "bf_gain", "optical_noise", "sar_noise", "dem_relief"):
            if not getattr(self, name) > 0:
                raise DataError(f"synthetic parameter {name} must be positive (got {getattr(self, name)})")
        if self.cell_sd <= 0 and self.smooth_sd <= 0:
            raise DataError("synthetic intensity has zero variance")


def gaussian_smooth(a: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian filter with reflected borders."""
    radius = max(1, int(np.ceil(3 * sigma)))
    x = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    p = np.pad(a, radius, mode="reflect")
    p = np.apply_along_axis(lambda v: np.convolve(v, k, mode="valid"), 0, p)
    return np.apply_along_axis(lambda v: np.convolve(v, k, mode="valid"), 1, p)


def neighbourhood_mean(a: np.ndarray, size: int = 3) -> np.ndarray:
    h = size // 2
    p = np.pad(a, h, mode="reflect")
    out = np.zeros_like(a, dtype=np.float64)
    R, C = a.shape
    for dr in range(size):
        for dc in range(size):
            out += p[dr:dr + R, dc:dc + C]
    return out / (size * size)


def resample_bilinear(src: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Pixel-centre-aligned bilinear resampling with clamped edges."""
    H, W = src.shape
    oh, ow = out_shape
    ys = np.clip((np.arange(oh) + 0.5) * H / oh - 0.5, 0, H - 1)
    xs = np.clip((np.arange(ow) + 0.5) * W / ow - 0.5, 0, W - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def synth_city(seed: int, rows: int, cols: int, params: SynthParams | None = None,
               city: str | None = None, year: int = 2022) -> CityStack:
    """Generate one deterministic synthetic city (labels + 7 channels)."""
    params = params or SynthParams()
    params.check()
    if rows < 16 or cols < 16:
        raise DataError(f"synthetic cities need at least 16x16 cells, got {rows}x{cols}")
    city = city or f"synth{seed}"
    rng = rng_for(seed, f"synth:{city}")

    jit = params.core_jitter_cells
    core = ((rows - 1) / 2 + rng.uniform(-jit, jit), (cols - 1) / 2 + rng.uniform(-jit, jit))
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    dist_km = 0.1 * np.hypot(rr - core[0], cc - core[1])

    smooth = gaussian_smooth(rng.normal(size=(rows, cols)), params.smooth_cells)
    smooth /= smooth.std()
    intensity = (np.exp(-dist_km / params.decay_km)
                 + params.smooth_sd * smooth
                 + params.cell_sd * rng.normal(size=(rows, cols)))
    intensity = np.maximum(intensity, 0.0)
    context = neighbourhood_mean(intensity, 3)

    # terrain: 30 m lattice -> bilinear 10 m
    coarse = gaussian_smooth(rng.normal(size=(PX * rows // 3 + 1, PX * cols // 3 + 1)), 8.0)
    coarse = (coarse - coarse.mean()) / coarse.std()
    dem_px = resample_bilinear(coarse, (PX * rows, PX * cols))
    dem_cell = dem_px.reshape(rows, PX, cols, PX).mean(axis=(1, 3))

    bf = params.bf_base + params.bf_gain * intensity + params.bf_noise * rng.normal(size=(rows, cols))
    bf = np.clip(bf, 0.0, 0.95)
    bh = (params.bh_base + params.bh_self * intensity + params.bh_context * context
          + params.bh_dem * dem_cell + params.bh_noise * rng.normal(size=(rows, cols)))
    bh = np.maximum(bh, 0.5)
    bh = np.where(bf <= 0.0, np.nan, bh).astype(np.float32)
    bf = bf.astype(np.float32)
    valid = filter_reason(bh, bf) == KEPT

    # per-pixel channels
    up = lambda a: np.repeat(np.repeat(a, PX, axis=0), PX, axis=1)  # noqa: E731
    bf_px = up(np.nan_to_num(bf))
    bh_px = up(np.nan_to_num(bh))
    shape = (PX * rows, PX * cols)
    material = rng.normal(size=shape)
    optical_gain = np.array([0.10, 0.12, 0.15, -0.20])
    optical_base = np.array([0.06, 0.08, 0.07, 0.30])
    optical = [optical_base[i] + optical_gain[i] * bf_px
               + params.optical_noise * (0.6 * material + 0.8 * rng.normal(size=shape))
               for i in range(4)]
    db = bh_px * bf_px / 2.0
    vv = db + params.sar_noise * rng.normal(size=shape)
    vh = 0.5 * db + 0.5 * params.sar_noise * rng.normal(size=shape)
    dem = 100.0 + params.dem_relief * dem_px

    channels = np.stack([vv, vh, *optical, dem]).astype(np.float32)
    assert channels.shape[0] == len(CHANNELS)
    grid = FishnetGrid(0.0, rows * 100.0, rows, cols)
    attrs = {
        "generator": "synth_city",
        "seed": int(seed),
        "core_row": float(core[0]),
        "core_col": float(core[1]),
        "params": asdict(params),
    }
    stack = CityStack(city, year, grid, channels, bh, bf, valid, attrs)
    stack.validate()
    return stack


def synth_cities(seed: int, n: int, rows: int = 56, cols: int = 56,
                 params: SynthParams | None = None) -> list[CityStack]:
    return [synth_city(seed * 1000 + i, rows, cols, params, city=f"synth{seed}_{i}") for i in range(n)]
