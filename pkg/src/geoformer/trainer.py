"""Training loop: AdamW, warmup + cosine schedule, early stopping, checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset_store.context import ContextBuilder, compute_norm_stats
from .dataset_store.types import CityStack, NormStats, Sample
from .diffcore import Tensor, no_grad
from .errors import ConfigError, DataError, NumericError
from .evaluation.metrics import r2_score
from .losses import LossState, init_delta, task_losses, total_loss, update_delta
from .model import ModelConfig, ModelParams, forward, init_params, load_model, save_model
from .seeding import derive_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    batch: int = 64
    max_epochs: int = 150
    warmup_epochs: float = 5
    patience: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.patience < 1 or self.batch < 1 or self.max_epochs < 1:
            raise ConfigError("patience, batch and max_epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.max_epochs:
            raise ConfigError(f"warmup_epochs must lie in [0, max_epochs), got {self.warmup_epochs}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config field(s) {sorted(unknown)}")
        return cls(**d)


def lr_at(t: float, cfg: TrainConfig) -> float:
    """Learning rate at fractional epoch ``t``: linear warmup from 0 over
    ``warmup_epochs``, then half-cosine to 0 at ``max_epochs``."""
    W, E = cfg.warmup_epochs, cfg.max_epochs
    if t <= 0:
        return 0.0
    if W > 0 and t < W:
        return cfg.lr * t / W
    if t >= E:
        return 0.0
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (t - W) / (E - W)))


class AdamW:
    """Adam with decoupled weight decay.

    Decay ``p <- p * (1 - lr * wd)`` applies only to tensors with two or
    more axes (weights), not to biases, norms or scalars.
    """

    def __init__(self, params: Sequence[Tensor], cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        c = self.cfg
        self.t += 1
        b1, b2 = c.beta1, c.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            dt = p.data.dtype.type
            if c.weight_decay and p.data.ndim >= 2:
                p.data *= dt(1.0 - lr * c.weight_decay)
            m *= dt(b1)
            m += dt(1.0 - b1) * g
            v *= dt(b2)
            v += dt(1.0 - b2) * (g * g)
            p.data -= dt(lr) * (m / dt(bc1)) / (np.sqrt(v / dt(bc2)) + dt(c.eps))

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"opt/t": np.array([self.t], dtype=np.int64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"opt/m{i}"] = m
            out[f"opt/v{i}"] = v
        return out

    def load_state(self, arrays: dict) -> None:
        self.t = int(arrays["opt/t"][0])
        for i in range(len(self.params)):
            self.m[i] = np.array(arrays[f"opt/m{i}"], dtype=self.params[i].data.dtype)
            self.v[i] = np.array(arrays[f"opt/v{i}"], dtype=self.params[i].data.dtype)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if total > max_norm:
        f = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(f)
    return total


# -- data --------------------------------------------------------------------

@dataclass
class SplitData:
    cells: list
    bh: np.ndarray
    bf: np.ndarray


@dataclass
class TrainData:
    """Context assembler plus the (city, row, col) cells and labels per split."""

    builder: ContextBuilder
    stats: NormStats
    splits: dict

    def __getitem__(self, name: str) -> SplitData:
        return self.splits[name]

    def x(self, cells) -> np.ndarray:
        return self.builder.batch(cells)


def make_data(stacks: Sequence[CityStack], samples: Sequence[Sample], k: int,
              stats: NormStats | None = None, channel_keep=None, mask_mode: str = "center") -> TrainData:
    stats = stats or compute_norm_stats(stacks, samples)
    builder = ContextBuilder(stacks, stats, k, mask_mode=mask_mode, channel_keep=channel_keep)
    splits = {}
    for name in ("train", "val", "test"):
        sel = sorted((s for s in samples if s.split == name), key=lambda s: (s.city, s.row, s.col))
        splits[name] = SplitData([(s.city, s.row, s.col) for s in sel],
                                 np.array([s.h_ave for s in sel], dtype=np.float64),
                                 np.array([s.lambda_p for s in sel], dtype=np.float64))
    return TrainData(builder, stats, splits)


def init_model(config: ModelConfig, data: TrainData, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Fresh parameters with the BH output bias at the training-label mean."""
    return init_params(config, seed=seed, dtype=dtype, bh_bias=float(np.mean(data["train"].bh)))


def predict_split(params: ModelParams, data: TrainData, split: str, batch: int = 256) -> tuple[np.ndarray, np.ndarray]:
    cells = data[split].cells
    bh, bf = [], []
    with no_grad():
        for i in range(0, len(cells), batch):
            a, b = forward(data.x(cells[i:i + batch]).astype(params.dtype, copy=False), params)
            bh.append(a.data)
            bf.append(b.data)
    if not cells:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(bh).astype(np.float64), np.concatenate(bf).astype(np.float64)


# -- log -----------------------------------------------------------------------

LOG_COLUMNS = ("epoch", "train_loss", "val_mae_bh", "val_mae_bf", "val_r2_bh", "val_r2_bf", "score",
               "lr", "delta_bh", "delta_bf", "sigma_bh", "sigma_bf")


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def append(self, **row) -> None:
        if self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise ValueError("epoch index must increase")
        self.rows.append({c: row[c] for c in LOG_COLUMNS})

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for r in self.rows:
                w.writerow([r["epoch"]] + [repr(float(r[c])) for c in LOG_COLUMNS[1:]])
        return path

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        out = cls()
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                out.rows.append({c: (int(rec[c]) if c == "epoch" else float(rec[c])) for c in LOG_COLUMNS})
        return out

    def to_json(self) -> str:
        return json.dumps(self.rows)

    @classmethod
    def from_json(cls, s: str) -> "TrainLog":
        return cls(json.loads(s))


# -- loop -------------------------------------------------------------------------

@dataclass
class EarlyStopper:
    """Stop once the score has not improved for ``patience`` consecutive epochs."""

    patience: int
    best: float = -math.inf
    best_epoch: int = 0
    bad: int = 0

    def update(self, epoch: int, score: float) -> tuple[bool, bool]:
        """Returns ``(improved, stop)``."""
        if score > self.best:
            self.best, self.best_epoch, self.bad = score, epoch, 0
            return True, False
        self.bad += 1
        return False, self.bad >= self.patience


@dataclass
class TrainResult:
    best: ModelParams
    loss_state: LossState
    log: TrainLog
    best_epoch: int
    best_score: float
    stopped_early: bool
    last_epoch: int


def _residual_pass(params: ModelParams, data: TrainData, batch: int) -> tuple[np.ndarray, np.ndarray]:
    bh, bf = predict_split(params, data, "train", batch=max(batch, 256))
    return bh - data["train"].bh, bf - data["train"].bf


def _save_state(path: Path, params: ModelParams, opt: AdamW, state: LossState, meta: dict) -> None:
    extra = dict(opt.state_arrays())
    extra.update(state.to_arrays())
    save_model(path, params, extra=extra, meta=meta)


def train(params: ModelParams, data: TrainData, cfg: TrainConfig, out_dir=None,
          stop_after: int | None = None, _resume: dict | None = None) -> TrainResult:
    """Optimise ``params`` in place; returns the best-scoring copy.

    With ``out_dir``, ``last.ckpt`` (full resumable state) and ``best.ckpt``
    are written every epoch, plus ``train_log.csv``. ``stop_after`` ends the
    run after that epoch without touching the schedule (an interruption).
    """
    train_split, val_split = data["train"], data["val"]
    if not train_split.cells or not val_split.cells:
        raise DataError("training needs non-empty train and val splits")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    if _resume is None:
        state = LossState.create(dtype=params.dtype)
        try:
            r_bh, r_bf = _residual_pass(params, data, cfg.batch)
        except NumericError as exc:
            raise NumericError(f"before epoch 1: {exc}") from None
        init_delta(state, r_bh, r_bf)
        opt = AdamW(list(params) + state.params(), cfg)
        tlog = TrainLog()
        start = 1
        stopper = EarlyStopper(cfg.patience)
        best = params.copy()
        best_state = state
    else:
        state, opt, tlog = _resume["state"], _resume["opt"], _resume["log"]
        start = _resume["epoch"] + 1
        stopper = EarlyStopper(cfg.patience, _resume["best_score"], _resume["best_epoch"], _resume["bad"])
        best = _resume["best"]
        best_state = _resume["best_state"]

    n = len(train_split.cells)
    n_batches = -(-n // cfg.batch)
    stopped = False
    epoch = start - 1
    for epoch in range(start, cfg.max_epochs + 1):
        order = np.random.default_rng(derive_seed(cfg.seed, f"shuffle:{epoch}")).permutation(n)
        res_bh = np.empty(n)
        res_bf = np.empty(n)
        loss_sum = 0.0
        lr = 0.0
        for b in range(n_batches):
            idx = order[b * cfg.batch:(b + 1) * cfg.batch]
            x = data.x([train_split.cells[i] for i in idx]).astype(params.dtype, copy=False)
            y_bh, y_bf = train_split.bh[idx], train_split.bf[idx]
            opt.zero_grad()
            try:
                bh, bf = forward(x, params)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {b}: {exc}") from None
            l_bh, l_bf = task_losses(bh, bf, y_bh, y_bf, state)
            loss = total_loss(l_bh, l_bf, state)
            if not np.isfinite(loss.item()):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            loss.backward()
            if cfg.grad_clip is not None:
                clip_grad_norm(opt.params, cfg.grad_clip)
            lr = lr_at(epoch - 1 + (b + 1) / n_batches, cfg)
            opt.step(lr)
            res_bh[idx] = bh.data - y_bh
            res_bf[idx] = bf.data - y_bf
            loss_sum += loss.item() * len(idx)
        update_delta(state, res_bh, res_bf)

        p_bh, p_bf = predict_split(params, data, "val")
        r2_bh = r2_score(p_bh, val_split.bh)
        r2_bf = r2_score(p_bf, val_split.bf)
        score = 0.5 * (r2_bh + r2_bf)
        if not np.isfinite(score):
            raise NumericError(f"validation score is not finite at epoch {epoch}")
        sig = state.sigma
        tlog.append(epoch=epoch, train_loss=loss_sum / n,
                    val_mae_bh=float(np.mean(np.abs(p_bh - val_split.bh))),
                    val_mae_bf=float(np.mean(np.abs(p_bf - val_split.bf))),
                    val_r2_bh=r2_bh, val_r2_bf=r2_bf, score=score, lr=lr,
                    delta_bh=state.delta["bh"], delta_bf=state.delta["bf"],
                    sigma_bh=sig["bh"], sigma_bf=sig["bf"])
        log.info("epoch %d loss %.4f val R2 bh %.3f bf %.3f", epoch, loss_sum / n, r2_bh, r2_bf)

        improved, stopped = stopper.update(epoch, score)
        if improved:
            best = params.copy()
            best_state = LossState.from_arrays(state.to_arrays(), dtype=params.dtype)
            if out_dir is not None:
                save_model(out_dir / "best.ckpt", best, extra=best_state.to_arrays(),
                           meta={"epoch": epoch, "score": score})
        if out_dir is not None:
            _save_state(out_dir / "last.ckpt", params, opt, state, {
                "epoch": epoch, "best_score": stopper.best, "best_epoch": stopper.best_epoch, "bad": stopper.bad,
                "stopped": stopped, "train_config": asdict(cfg), "log": tlog.rows,
            })
            tlog.write_csv(out_dir / "train_log.csv")
        if stopped or (stop_after is not None and epoch >= stop_after):
            break

    return TrainResult(best, best_state, tlog, stopper.best_epoch, stopper.best, stopped, epoch)


def resume(checkpoint, data: TrainData, cfg: TrainConfig, out_dir=None,
           expect: ModelConfig | None = None, stop_after: int | None = None) -> TrainResult:
    """Continue a run from its ``last.ckpt``; bit-identical to not stopping."""
    checkpoint = Path(checkpoint)
    params, extra, meta = load_model(checkpoint, expect=expect)
    if meta.get("train_config") != json.loads(json.dumps(asdict(cfg))):
        raise ConfigError(f"{checkpoint}: training config differs from the one the run started with")
    state = LossState.from_arrays(extra, dtype=params.dtype)
    opt = AdamW(list(params) + state.params(), cfg)
    opt.load_state(extra)
    best_path = checkpoint.with_name("best.ckpt")
    if meta["best_epoch"] > 0 and best_path.exists():
        best, best_extra, _ = load_model(best_path, expect=params.config)
        best_state = LossState.from_arrays(best_extra, dtype=params.dtype)
    else:
        best, best_state = params.copy(), state
    if meta.get("stopped"):
        return TrainResult(best, best_state, TrainLog(list(meta["log"])), meta["best_epoch"],
                           meta["best_score"], True, meta["epoch"])
    ctx = {"state": state, "opt": opt, "log": TrainLog(list(meta["log"])), "epoch": int(meta["epoch"]),
           "best_score": float(meta["best_score"]), "best_epoch": int(meta["best_epoch"]), "bad": int(meta["bad"]),
           "best": best, "best_state": best_state}
    return train(params, data, cfg, out_dir=out_dir if out_dir is not None else checkpoint.parent,
                 stop_after=stop_after, _resume=ctx)
