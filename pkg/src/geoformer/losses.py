"""Adaptive Huber task losses combined by learned homoscedastic uncertainty.

``total = L_bh / (2 s_bh^2) + L_bf / (2 s_bf^2) + log s_bh + log s_bf`` with
each ``s`` stored as ``log s`` so it stays positive. The Huber thresholds
are not learned; they track the mean absolute training residual per epoch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, DataError

TASKS = ("bh", "bf")
DELTA_MIN = {"bh": 0.1, "bf": 0.01}
DELTA_MAX_FACTOR = 10.0


def huber(pred: Tensor, target, delta: float, reduce: str = "mean") -> Tensor:
    """Huber loss with the ``e^2 / (2 delta)`` quadratic branch.

    Continuous with slope 1 at ``|e| = delta``; the gradient with respect
    to ``e`` is ``clip(e / delta, -1, 1)``.
    """
    if not delta > 0:
        raise ConfigError(f"Huber delta must be positive, got {delta}")
    pred = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=np.float64))
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise dc.ShapeError("huber", pred.shape, t.shape)
    d = pred.dtype.type(delta)
    e = pred.data - t
    a = np.abs(e)
    quad = a < d
    val = np.where(quad, e * e / (2 * d), a - d / 2)
    slope = np.where(quad, e / d, np.sign(e)).astype(pred.dtype)
    out = Tensor._make(val.astype(pred.dtype), (pred,), lambda g: (g * slope,))
    if reduce == "mean":
        return dc.mean(out)
    if reduce == "sum":
        return dc.sum_(out)
    if reduce == "none":
        return out
    raise ConfigError(f"unknown reduction {reduce!r}")


@dataclass
class LossState:
    """Learnable log-uncertainties plus the per-epoch Huber thresholds."""

    log_sigma: dict = field(default_factory=dict)
    delta: dict = field(default_factory=dict)
    delta_min: dict = field(default_factory=lambda: dict(DELTA_MIN))
    delta_max: dict = field(default_factory=lambda: {t: np.inf for t in TASKS})

    @classmethod
    def create(cls, delta_bh: float = 1.0, delta_bf: float = 0.05, dtype=np.float32,
               delta_min: dict | None = None) -> "LossState":
        s = cls()
        if delta_min is not None:
            s.delta_min = {t: float(delta_min[t]) for t in TASKS}
        s.log_sigma = {t: Tensor(np.zeros((), dtype=dtype), requires_grad=True, name=f"log_sigma_{t}")
                       for t in TASKS}
        s.delta = {"bh": float(delta_bh), "bf": float(delta_bf)}
        return s

    @property
    def sigma(self) -> dict:
        return {t: float(np.exp(self.log_sigma[t].data)) for t in TASKS}

    def params(self) -> list[Tensor]:
        return [self.log_sigma[t] for t in TASKS]

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for t in TASKS:
            out[f"loss/log_sigma_{t}"] = np.asarray(self.log_sigma[t].data)
            out[f"loss/delta_{t}"] = np.array([self.delta[t], self.delta_min[t], self.delta_max[t]], dtype=np.float64)
        return out

    @classmethod
    def from_arrays(cls, arrays: dict, dtype=np.float32) -> "LossState":
        s = cls()
        for t in TASKS:
            s.log_sigma[t] = Tensor(np.asarray(arrays[f"loss/log_sigma_{t}"], dtype=dtype).reshape(()),
                                    requires_grad=True, name=f"log_sigma_{t}")
            d, lo, hi = (float(v) for v in arrays[f"loss/delta_{t}"])
            s.delta[t], s.delta_min[t], s.delta_max[t] = d, lo, hi
        return s


def total_loss(l_bh: Tensor, l_bf: Tensor, state: LossState) -> Tensor:
    """Uncertainty-weighted sum of the two (already batch-averaged) task losses."""
    terms = []
    for loss, t in ((l_bh, "bh"), (l_bf, "bf")):
        s = state.log_sigma[t]
        w = dc.exp(dc.scale(s, -2.0))  # 1 / sigma^2
        terms.append(dc.add(dc.scale(dc.mul(w, loss), 0.5), s))
    return dc.add(terms[0], terms[1])


def task_losses(bh: Tensor, bf: Tensor, y_bh, y_bf, state: LossState) -> tuple[Tensor, Tensor]:
    return huber(bh, y_bh, state.delta["bh"]), huber(bf, y_bf, state.delta["bf"])


def _mae(residuals, task: str) -> float:
    r = np.asarray(residuals, dtype=np.float64).ravel()
    if r.size == 0:
        raise DataError(f"no {task} residuals to update the Huber threshold")
    if not np.all(np.isfinite(r)):
        raise DataError(f"non-finite {task} residuals")
    return float(np.mean(np.abs(r)))


def init_delta(state: LossState, res_bh, res_bf) -> LossState:
    """Initial thresholds from the untrained model's residuals; also fixes
    the upper clamp at ``DELTA_MAX_FACTOR`` times the initial value."""
    for t, r in (("bh", res_bh), ("bf", res_bf)):
        d0 = max(_mae(r, t), state.delta_min[t])
        state.delta_max[t] = DELTA_MAX_FACTOR * d0
        state.delta[t] = d0
    return state


def update_delta(state: LossState, res_bh, res_bf) -> LossState:
    """``delta <- clamp(MAE(residuals), delta_min, delta_max)`` per task."""
    for t, r in (("bh", res_bh), ("bf", res_bf)):
        state.delta[t] = float(np.clip(_mae(r, t), state.delta_min[t], state.delta_max[t]))
    return state
