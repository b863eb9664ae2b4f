"""Normalisation statistics and k x k context-tensor assembly."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from ..errors import DataError
from .types import CHANNELS, PX, CityStack, ContextTensor, NormStats, Sample

MASK_MODES = ("center", "valid")


def compute_norm_stats(stacks: Sequence[CityStack], samples: Sequence[Sample]) -> NormStats:
    """Per-channel mean/std over the pixels of training-split samples only."""
    by_city = {s.city: s for s in stacks}
    total = np.zeros(len(CHANNELS))
    total_sq = np.zeros(len(CHANNELS))
    n = 0
    for city in sorted({s.city for s in samples if s.split == "train"}):
        stack = by_city[city]
        cells = sorted((s.row, s.col) for s in samples if s.split == "train" and s.city == city)
        rr = np.array([r for r, _ in cells])
        cc = np.array([c for _, c in cells])
        blocks = stack.channels.reshape(len(CHANNELS), stack.rows, PX, stack.cols, PX)
        px = blocks[:, rr, :, cc, :].astype(np.float64)  # (n, 7, PX, PX)
        total += px.sum(axis=(0, 2, 3))
        total_sq += (px * px).sum(axis=(0, 2, 3))
        n += px.shape[0] * PX * PX
    if n == 0:
        raise DataError("no training samples to compute normalisation statistics")
    mean = total / n
    var = np.maximum(total_sq / n - mean * mean, 0.0)
    return NormStats(mean, np.sqrt(var))


def _check_k(k: int) -> None:
    if k < 1 or k % 2 == 0:
        raise DataError(f"context size k must be a positive odd integer, got {k}")


def mask_channel(k: int, mode: str = "center", onboard: np.ndarray | None = None) -> np.ndarray:
    """Binary mask plane ``(PX*k, PX*k)``.

    ``center`` marks only the central patch; ``valid`` marks every patch
    whose source cell lies on the grid (``onboard`` is the k x k boolean).
    """
    if mode == "center":
        m = np.zeros((k, k), dtype=np.float32)
        m[k // 2, k // 2] = 1.0
    elif mode == "valid":
        m = np.asarray(onboard, dtype=np.float32)
    else:
        raise DataError(f"unknown mask mode {mode!r}")
    return np.kron(m, np.ones((PX, PX), dtype=np.float32))


class ContextBuilder:
    """Batched context assembly for one set of cities.

    Channels are standardised once and surrounded by ``pad`` cells of zeros
    (post-normalisation zeros), so a k x k window is a plain slice.
    ``channel_keep`` zeroes dropped modalities (ablations).
    """

    def __init__(self, stacks: Sequence[CityStack], stats: NormStats, k: int,
                 mask_mode: str = "center", channel_keep: Sequence[bool] | None = None):
        _check_k(k)
        if mask_mode not in MASK_MODES:
            raise DataError(f"unknown mask mode {mask_mode!r}")
        self.k = k
        self.mask_mode = mask_mode
        self.pad = k // 2
        keep = np.ones(len(CHANNELS), bool) if channel_keep is None else np.asarray(channel_keep, bool)
        if keep.shape != (len(CHANNELS),):
            raise DataError("channel_keep needs one flag per channel")
        self.channel_keep = keep
        mean = stats.mean.astype(np.float32)[:, None, None]
        std = stats.std.astype(np.float32)[:, None, None]
        self._norm: dict[str, np.ndarray] = {}
        self._dims: dict[str, tuple[int, int]] = {}
        p = self.pad * PX
        for s in stacks:
            z = (s.channels - mean) / std
            z[~keep] = 0.0
            self._norm[s.city] = np.pad(z.astype(np.float32), ((0, 0), (p, p), (p, p)))
            self._dims[s.city] = (s.rows, s.cols)
        self._center_mask = mask_channel(k, "center")

    def _onboard(self, city: str, row: int, col: int) -> np.ndarray:
        R, C = self._dims[city]
        h = self.pad
        rr = np.arange(row - h, row + h + 1)[:, None]
        cc = np.arange(col - h, col + h + 1)[None, :]
        return (rr >= 0) & (rr < R) & (cc >= 0) & (cc < C)

    def one(self, city: str, row: int, col: int, out: np.ndarray | None = None) -> np.ndarray:
        R, C = self._dims[city]
        if not (0 <= row < R and 0 <= col < C):
            raise DataError(f"sample ({row}, {col}) lies off the {R}x{C} grid of {city}")
        side = PX * self.k
        if out is None:
            out = np.empty((len(CHANNELS) + 1, side, side), dtype=np.float32)
        z = self._norm[city]
        out[: len(CHANNELS)] = z[:, PX * row: PX * row + side, PX * col: PX * col + side]
        if self.mask_mode == "center":
            out[-1] = self._center_mask
        else:
            out[-1] = mask_channel(self.k, "valid", self._onboard(city, row, col))
        return out

    def batch(self, cells: Sequence[tuple[str, int, int]]) -> np.ndarray:
        side = PX * self.k
        out = np.empty((len(cells), len(CHANNELS) + 1, side, side), dtype=np.float32)
        for i, (city, r, c) in enumerate(cells):
            self.one(city, r, c, out[i])
        return out


def assemble_context(stack: CityStack, sample: Sample, k: int, stats: NormStats,
                     mask_mode: str = "center") -> ContextTensor:
    """Gather the k x k neighbourhood of 10 x 10 patches around ``sample``.

    Off-grid cells are zero after standardisation; the mask channel marks
    the centre patch (or every on-grid patch with ``mask_mode="valid"``).
    """
    _check_k(k)
    if not (0 <= sample.row < stack.rows and 0 <= sample.col < stack.cols):
        raise DataError(f"sample ({sample.row}, {sample.col}) lies off the grid of {stack.city}")
    builder = ContextBuilder([stack], stats, k, mask_mode)
    return ContextTensor(k, builder.one(stack.city, sample.row, sample.col), (sample.row, sample.col))


def split_index(samples: Sequence[Sample]) -> Mapping[str, list[Sample]]:
    out: dict[str, list[Sample]] = {}
    for s in samples:
        out.setdefault(s.split, []).append(s)
    return out
