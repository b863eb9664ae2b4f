from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError
from ..grid_labeling import KEPT, FishnetGrid, filter_reason

CHANNELS = ("VV", "VH", "B2", "B3", "B4", "B8", "DEM")
SAR = ("VV", "VH")
OPTICAL = ("B2", "B3", "B4", "B8")
PX = 10  # pixels per 100 m cell side
SPLITS = ("train", "val", "test", "purged")


@dataclass
class CityStack:
    """Aligned rasters for one city.

    ``channels`` is ``(7, PX*rows, PX*cols)`` float32 in :data:`CHANNELS`
    order; ``bh`` / ``bf`` are ``(rows, cols)`` label grids and ``valid``
    marks cells that passed the plausibility filter.
    """

    city: str
    year: int
    grid: FishnetGrid
    channels: np.ndarray
    bh: np.ndarray
    bf: np.ndarray
    valid: np.ndarray
    attrs: dict = field(default_factory=dict)

    @property
    def rows(self) -> int:
        return self.grid.rows

    @property
    def cols(self) -> int:
        return self.grid.cols

    def validate(self) -> None:
        R, C = self.rows, self.cols
        if self.channels.shape != (len(CHANNELS), PX * R, PX * C):
            raise DataError(
                f"{self.city}: channel stack {self.channels.shape} does not match "
                f"{(len(CHANNELS), PX * R, PX * C)} for a {R}x{C} grid"
            )
        for name, arr in (("bh", self.bh), ("bf", self.bf), ("valid", self.valid)):
            if arr.shape != (R, C):
                raise DataError(f"{self.city}: {name} grid {arr.shape} != {(R, C)}")
        v = self.valid.astype(bool)
        if not (np.all(np.isfinite(self.bh[v])) and np.all(np.isfinite(self.bf[v]))):
            raise DataError(f"{self.city}: non-finite labels in valid cells")
        pix = np.repeat(np.repeat(v, PX, axis=0), PX, axis=1)
        if not np.all(np.isfinite(self.channels[:, pix])):
            raise DataError(f"{self.city}: non-finite channel values in valid cells")
        codes = filter_reason(self.bh[v], self.bf[v])
        if np.any(codes != KEPT):
            raise DataError(f"{self.city}: {int(np.count_nonzero(codes))} valid cells fail the sample filter")

    def samples(self) -> list["Sample"]:
        rr, cc = np.nonzero(self.valid)
        return [
            Sample(self.city, int(r), int(c), float(self.bh[r, c]), float(self.bf[r, c]))
            for r, c in zip(rr, cc)
        ]


@dataclass
class Sample:
    city: str
    row: int
    col: int
    h_ave: float
    lambda_p: float
    split: str = "train"

    def with_split(self, split: str) -> "Sample":
        return Sample(self.city, self.row, self.col, self.h_ave, self.lambda_p, split)


@dataclass(frozen=True)
class ContextTensor:
    k: int
    data: np.ndarray  # (8, PX*k, PX*k)
    center: tuple[int, int]


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != (len(CHANNELS),) or self.std.shape != (len(CHANNELS),):
            raise DataError("NormStats needs one mean/std per channel")
        if not np.all(self.std > 0):
            bad = [CHANNELS[i] for i in np.nonzero(~(self.std > 0))[0]]
            raise DataError(f"zero standard deviation in channel(s) {bad}")

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "channels": list(CHANNELS)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(d["mean"], d["std"])

    @classmethod
    def identity(cls) -> "NormStats":
        return cls(np.zeros(len(CHANNELS)), np.ones(len(CHANNELS)))
