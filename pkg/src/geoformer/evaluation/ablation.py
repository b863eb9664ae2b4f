"""Structural and modality ablations."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..dataset_store import CHANNELS, OPTICAL, SAR, CityStack, Sample, compute_norm_stats
from ..errors import ConfigError, DataError
from ..model import ModelConfig
from .. import trainer as tr
from .metrics import MetricReport, metrics

DROPPED = {
    "full": (),
    "enlarged": (),
    "no_dem": ("DEM",),
    "no_sar": SAR,
    "no_optical": OPTICAL,
}
ABLATIONS = tuple(DROPPED)
STRUCTURAL = ("full", "enlarged", "no_dem")
MODALITY = ("full", "no_sar", "no_optical")


@dataclass(frozen=True)
class AblationSpec:
    name: str
    channel_keep: tuple[bool, ...]
    capacity_scale: int = 1

    def __post_init__(self):
        object.__setattr__(self, "channel_keep", tuple(bool(v) for v in self.channel_keep))
        if len(self.channel_keep) != len(CHANNELS):
            raise ConfigError(f"channel mask needs {len(CHANNELS)} flags, got {len(self.channel_keep)}")
        if not any(self.channel_keep):
            raise ConfigError("ablation masks every input channel")
        if self.name not in DROPPED:
            raise ConfigError(f"unknown ablation {self.name!r}; expected one of {ABLATIONS}")
        expect = tuple(c not in DROPPED[self.name] for c in CHANNELS)
        if self.channel_keep != expect:
            dropped = [c for c, k in zip(CHANNELS, self.channel_keep) if not k]
            raise ConfigError(f"ablation {self.name!r} must drop {list(DROPPED[self.name])}, mask drops {dropped}")
        if self.capacity_scale != (2 if self.name == "enlarged" else 1):
            raise ConfigError(f"ablation {self.name!r} has inconsistent capacity_scale {self.capacity_scale}")

    @classmethod
    def named(cls, name: str) -> "AblationSpec":
        if name not in DROPPED:
            raise ConfigError(f"unknown ablation {name!r}; expected one of {ABLATIONS}")
        keep = tuple(c not in DROPPED[name] for c in CHANNELS)
        return cls(name, keep, 2 if name == "enlarged" else 1)

    @property
    def dropped(self) -> tuple[str, ...]:
        return tuple(c for c, k in zip(CHANNELS, self.channel_keep) if not k)


@dataclass
class AblationResult:
    spec: AblationSpec
    test: dict[str, MetricReport]
    train: dict[str, MetricReport]
    n_params: int
    best_epoch: int

    @property
    def gap(self) -> dict[str, float]:
        """Test minus train RMSE; larger means more overfitting."""
        return {t: self.test[t].rmse - self.train[t].rmse for t in ("bh", "bf")}


def run_ablation(spec: AblationSpec, stacks: Sequence[CityStack], samples: Sequence[Sample],
                 model: ModelConfig, cfg: "tr.TrainConfig", seed: int = 0, out_dir=None) -> AblationResult:
    """Train one variant and score it on its train and test splits.

    Normalisation statistics come from the unmasked training data so every
    variant sees the same scaling for the channels it keeps.
    """
    if model.variant != "geoformer":
        raise ConfigError("ablations are defined for the geoformer variant")
    for s in stacks:
        if s.channels.shape[0] != len(CHANNELS):
            raise DataError(f"{s.city}: container lacks channels required by the ablation")
    stats = compute_norm_stats(stacks, samples)
    data = tr.make_data(stacks, samples, model.k, stats=stats, channel_keep=spec.channel_keep)
    mcfg = model.with_(capacity_scale=spec.capacity_scale)
    params = tr.init_model(mcfg, data, seed=seed)
    res = tr.train(params, data, cfg, out_dir=Path(out_dir) / spec.name if out_dir is not None else None)
    scores = {}
    for split in ("train", "test"):
        bh, bf = tr.predict_split(res.best, data, split)
        sd = data[split]
        scores[split] = {"bh": metrics(bh, sd.bh, "bh", spec.name, split),
                         "bf": metrics(bf, sd.bf, "bf", spec.name, split)}
    return AblationResult(spec, scores["test"], scores["train"], res.best.n_params, res.best_epoch)


def mean_predictor_rmse(targets_train, targets_test) -> float:
    return float(np.sqrt(np.mean((np.asarray(targets_test) - np.mean(targets_train)) ** 2)))
