"""Parameter containers, initialisation and checkpoints."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from ..diffcore import Tensor, load_arrays, save_arrays
from ..errors import ConfigError
from ..seeding import rng_for
from .config import ModelConfig


class ModelParams:
    """Named learnable tensors whose shapes follow from a :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig, tensors: Mapping[str, Tensor]):
        self.config = config
        self.tensors: dict[str, Tensor] = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def n_params(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: Tensor(t.data.astype(dtype), requires_grad=True, name=k)
                                         for k, t in self.tensors.items()})

    def copy(self) -> "ModelParams":
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self.tensors.values())

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        missing = set(self.tensors) - set(arrays)
        if missing:
            raise ConfigError(f"checkpoint lacks parameter(s) {sorted(missing)[:5]}")
        for k, t in self.tensors.items():
            a = np.asarray(arrays[k])
            if a.shape != t.shape:
                raise ConfigError(f"parameter {k}: checkpoint shape {a.shape} != model shape {t.shape}")
            t.data = a.astype(t.dtype, copy=True)


class _Init:
    def __init__(self, seed: int, dtype):
        self.rng = rng_for(seed, "model-init")
        self.dtype = dtype
        self.out: dict[str, Tensor] = {}

    def add(self, name: str, arr: np.ndarray) -> None:
        self.out[name] = Tensor(np.asarray(arr, dtype=self.dtype), requires_grad=True, name=name)

    def linear(self, name: str, fan_in: int, fan_out: int, std: float | None = None) -> None:
        std = math.sqrt(2.0 / (fan_in + fan_out)) if std is None else std
        self.add(f"{name}.w", self.rng.normal(0.0, std, size=(fan_in, fan_out)))
        self.add(f"{name}.b", np.zeros(fan_out))

    def norm(self, name: str, dim: int) -> None:
        self.add(f"{name}.g", np.ones(dim))
        self.add(f"{name}.b", np.zeros(dim))


def _heads(init: _Init, width: int, hidden: int, bh_bias: float) -> None:
    for task in ("bh", "bf"):
        init.linear(f"head_{task}.0", width, hidden)
        init.linear(f"head_{task}.1", hidden, 1)
    init.out["head_bh.1.b"].data[:] = bh_bias


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32, bh_bias: float = 0.0) -> ModelParams:
    """Deterministic initialisation; ``bh_bias`` sets the BH output bias
    (e.g. the training-label mean) so the final ReLU starts active."""
    init = _Init(seed, dtype)
    if config.variant == "cnn_baseline":
        c_in = config.in_channels
        for i, c_out in enumerate(config.cnn_widths):
            init.linear(f"conv{i}", 9 * c_in, c_out, std=math.sqrt(2.0 / (9 * c_in)))
            c_in = c_out
        if config.cnn_se:
            r = max(1, c_in // 4)
            init.linear("se.0", c_in, r)
            init.linear("se.1", r, c_in)
        init.norm("norm", c_in)
        _heads(init, c_in, config.hidden, bh_bias)
        return ModelParams(config, init.out)

    D, w, H = config.dim, config.w, config.n_heads
    hid = config.mlp_ratio * D
    init.linear("embed", config.patch_dim, D)
    for b in range(config.blocks):
        for s in range(2):
            p = f"block{b}.{s}"
            init.norm(f"{p}.ln1", D)
            init.linear(f"{p}.qkv", D, 3 * D)
            init.add(f"{p}.relpos", init.rng.normal(0.0, 0.02, size=((2 * w - 1) ** 2, H)))
            init.linear(f"{p}.proj", D, D)
            init.norm(f"{p}.ln2", D)
            init.linear(f"{p}.fc1", D, hid)
            init.linear(f"{p}.fc2", hid, D)
    init.norm("norm", D)
    _heads(init, D, config.hidden, bh_bias)
    return ModelParams(config, init.out)


# -- checkpoints --------------------------------------------------------------

PREFIX = "model/"


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_model(path, params: ModelParams, extra: Mapping[str, np.ndarray] | None = None,
               meta: Mapping | None = None) -> Path:
    """Write parameters (plus optional extra arrays) and a JSON config sidecar.

    The config hash is stored both in the checkpoint header and the sidecar.
    """
    path = Path(path)
    arrays = {PREFIX + k: v for k, v in params.arrays().items()}
    for k, v in (extra or {}).items():
        arrays[k] = v
    header = {"config": params.config.resolved(), "config_hash": params.config.hash}
    header.update(meta or {})
    save_arrays(path, arrays, header)
    side = {"config": params.config.resolved(), "config_hash": params.config.hash}
    sidecar_path(path).write_text(json.dumps(side, indent=1, sort_keys=True) + "\n")
    return path


def read_model_config(path) -> ModelConfig:
    side = sidecar_path(path)
    try:
        d = json.loads(side.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{side}: model config sidecar not found") from None
    cfg = ModelConfig.from_dict(d["config"])
    if cfg.hash != d.get("config_hash"):
        raise ConfigError(f"{side}: config hash {d.get('config_hash')} does not match its contents ({cfg.hash})")
    return cfg


def load_model(path, expect: ModelConfig | None = None) -> tuple[ModelParams, dict[str, np.ndarray], dict]:
    """Load ``(params, extra_arrays, meta)``; ``expect`` guards against config drift."""
    cfg = read_model_config(path)
    arrays, meta = load_arrays(path)
    if meta.get("config_hash") != cfg.hash:
        raise ConfigError(f"{path}: checkpoint config hash {meta.get('config_hash')} != sidecar {cfg.hash}")
    if expect is not None and expect.hash != cfg.hash:
        raise ConfigError(
            f"config hash mismatch: checkpoint {cfg.hash} (k={cfg.k}, variant={cfg.variant}) "
            f"vs requested {expect.hash} (k={expect.k}, variant={expect.variant})"
        )
    params = init_params(cfg)
    model_arrays = {k[len(PREFIX):]: v for k, v in arrays.items() if k.startswith(PREFIX)}
    params.load_arrays(model_arrays)
    extra = {k: v for k, v in arrays.items() if not k.startswith(PREFIX)}
    return params, extra, meta
