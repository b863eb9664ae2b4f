from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

from ..errors import ConfigError

VARIANTS = ("geoformer", "cnn_baseline")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``embed_dim`` and ``n_blocks`` are the base values; ``capacity_scale``
    multiplies both (the enlarged ablation uses 2). A block is one
    W-MSA sublayer followed by one SW-MSA sublayer. ``window`` and
    ``head_hidden`` default to ``min(k, 5)`` and ``dim // 2``.
    """

    variant: str = "geoformer"
    k: int = 5
    patch_px: int = 10
    in_channels: int = 8
    embed_dim: int = 32
    n_heads: int = 4
    n_blocks: int = 2
    window: int | None = None
    mlp_ratio: int = 4
    head_hidden: int | None = None
    capacity_scale: int = 1
    cnn_widths: tuple[int, ...] = field(default=(16, 32, 64))
    cnn_se: bool = False

    def __post_init__(self):
        object.__setattr__(self, "cnn_widths", tuple(int(w) for w in self.cnn_widths))
        self.check()

    @property
    def dim(self) -> int:
        return self.embed_dim * self.capacity_scale

    @property
    def blocks(self) -> int:
        return self.n_blocks * self.capacity_scale

    @property
    def w(self) -> int:
        return self.window if self.window is not None else min(self.k, 5)

    @property
    def shift(self) -> int:
        return self.w // 2

    @property
    def hidden(self) -> int:
        if self.head_hidden is not None:
            return self.head_hidden
        width = self.dim if self.variant == "geoformer" else self.cnn_widths[-1]
        return max(1, width // 2)

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_px * self.patch_px

    def check(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown model variant {self.variant!r}")
        if self.k < 1 or self.k % 2 == 0:
            raise ConfigError(f"k must be a positive odd integer, got {self.k}")
        if self.patch_px < 1 or self.in_channels < 1:
            raise ConfigError("patch_px and in_channels must be positive")
        if self.capacity_scale < 1:
            raise ConfigError("capacity_scale must be >= 1")
        if self.variant == "cnn_baseline":
            if self.k != 1:
                raise ConfigError(f"the CNN baseline takes single-cell inputs (k=1), got k={self.k}")
            if not self.cnn_widths or min(self.cnn_widths) < 1:
                raise ConfigError("cnn_widths must be positive")
            return
        if self.dim % self.n_heads:
            raise ConfigError(f"embed dim {self.dim} not divisible by {self.n_heads} heads")
        if not 1 <= self.w <= self.k:
            raise ConfigError(f"window size {self.w} must lie in [1, k={self.k}]")
        if self.mlp_ratio < 1 or self.n_blocks < 1:
            raise ConfigError("mlp_ratio and n_blocks must be >= 1")

    def resolved(self) -> dict:
        d = asdict(self)
        d["cnn_widths"] = list(self.cnn_widths)
        d["window"] = self.w
        d["head_hidden"] = self.hidden
        return d

    def to_json(self) -> str:
        return json.dumps(self.resolved(), sort_keys=True)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config field(s) {sorted(unknown)}")
        return cls(**d)

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)
