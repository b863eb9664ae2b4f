"""GeoFormer forward pass and the single-patch CNN baseline."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .. import diffcore as dc
from ..diffcore import Tensor, no_grad
from ..errors import NumericError
from .params import ModelParams

MASK_BIAS = -1e9


def _check(t: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite activations after {where}")
    return t


def linear(x: Tensor, params: ModelParams, name: str) -> Tensor:
    return dc.add(dc.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


# -- patch embedding ---------------------------------------------------------

def patch_embed(x, params: ModelParams) -> Tensor:
    """``(B, C, P*k, P*k)`` -> token grid ``(B, k, k, D)``.

    Each cell's ``C x P x P`` patch is flattened channel-major and projected.
    """
    cfg = params.config
    x = _as_input(x)
    k, P, C = cfg.k, cfg.patch_px, cfg.in_channels
    if x.ndim != 4 or x.shape[1:] != (C, P * k, P * k):
        raise dc.ShapeError("patch_embed", x.shape, (C, P * k, P * k))
    B = x.shape[0]
    t = dc.reshape(x, (B, C, k, P, k, P))
    t = dc.transpose(t, (0, 2, 4, 1, 3, 5))
    t = dc.reshape(t, (B, k, k, C * P * P))
    return linear(t, params, "embed")


# -- window attention --------------------------------------------------------

@lru_cache(maxsize=None)
def relative_index(w: int) -> np.ndarray:
    """``(w*w, w*w)`` index into the ``(2w-1)^2`` relative-position table."""
    yy, xx = np.divmod(np.arange(w * w), w)
    dy = yy[:, None] - yy[None, :] + w - 1
    dx = xx[:, None] - xx[None, :] + w - 1
    return dy * (2 * w - 1) + dx


@lru_cache(maxsize=None)
def _groups(k: int, w: int, shift: int) -> np.ndarray:
    """Per padded, shifted position along one axis: 0/1 for the two sides of
    the cyclic wrap, 2 for padding."""
    n = -(-k // w) * w
    g = np.full(n, 2, dtype=np.int64)
    for p in range(k):
        g[p] = 0 if p + shift < k else 1
    return g


@lru_cache(maxsize=None)
def attention_mask(k: int, w: int, shift: int) -> np.ndarray:
    """Additive bias ``(n_windows, N, N)``: 0 where two tokens of a window may
    attend, ``MASK_BIAS`` across the wrap seam or onto padding."""
    g = _groups(k, w, shift)
    n = len(g)
    nw = n // w
    gr = g[:, None] * 3 + g[None, :]  # (row, col) group code per token
    win = gr.reshape(nw, w, nw, w).transpose(0, 2, 1, 3).reshape(nw * nw, w * w)
    same = win[:, :, None] == win[:, None, :]
    mask = np.where(same, 0.0, MASK_BIAS)
    mask.flags.writeable = False
    return mask


def window_attention(h: Tensor, params: ModelParams, prefix: str, shifted: bool,
                     keep_attn: list | None = None) -> Tensor:
    """(S)W-MSA on a normalised token grid ``(B, k, k, D)``."""
    cfg = params.config
    B, k, _, D = h.shape
    w, H = cfg.w, cfg.n_heads
    dh = D // H
    s = cfg.shift if shifted else 0
    if s:
        h = dc.roll(h, (-s, -s), (1, 2))
    n = -(-k // w) * w
    if n != k:
        h = dc.pad(h, ((0, 0), (0, n - k), (0, n - k), (0, 0)))
    nw, N = n // w, w * w
    t = dc.reshape(h, (B, nw, w, nw, w, D))
    t = dc.transpose(t, (0, 1, 3, 2, 4, 5))
    t = dc.reshape(t, (B, nw * nw, N, D))
    qkv = linear(t, params, f"{prefix}.qkv")
    qkv = dc.transpose(dc.reshape(qkv, (B, nw * nw, N, 3, H, dh)), (3, 0, 1, 4, 2, 5))
    q = dc.scale(dc.slice_(qkv, (0,)), dh ** -0.5)
    kk = dc.slice_(qkv, (1,))
    v = dc.slice_(qkv, (2,))
    scores = dc.matmul(q, dc.transpose(kk, (0, 1, 2, 4, 3)))  # (B, nWin, H, N, N)
    rel = dc.gather(params[f"{prefix}.relpos"], relative_index(w), axis=0)  # (N, N, H)
    scores = dc.add(scores, dc.transpose(rel, (2, 0, 1)))
    if s or n != k:
        mask = attention_mask(k, w, s)[:, None, :, :]
        scores = dc.add_mask(scores, np.broadcast_to(mask, (nw * nw, H, N, N)))
    attn = dc.softmax(scores)
    if keep_attn is not None:
        keep_attn.append(attn.data)
    out = dc.matmul(attn, v)  # (B, nWin, H, N, dh)
    out = dc.reshape(dc.transpose(out, (0, 1, 3, 2, 4)), (B, nw * nw, N, D))
    out = linear(out, params, f"{prefix}.proj")
    out = dc.reshape(out, (B, nw, nw, w, w, D))
    out = dc.reshape(dc.transpose(out, (0, 1, 3, 2, 4, 5)), (B, n, n, D))
    if n != k:
        out = dc.slice_(out, (slice(None), slice(0, k), slice(0, k)))
    if s:
        out = dc.roll(out, (s, s), (1, 2))
    return out


def swin_layer(x: Tensor, params: ModelParams, prefix: str, shifted: bool,
               keep_attn: list | None = None) -> Tensor:
    """Pre-norm residual pair: LN -> (S)W-MSA -> add, LN -> MLP(GELU) -> add."""
    h = dc.layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    x = dc.add(x, window_attention(h, params, prefix, shifted, keep_attn))
    h = dc.layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    h = linear(dc.gelu(linear(h, params, f"{prefix}.fc1")), params, f"{prefix}.fc2")
    return dc.add(x, h)


def swin_block(x: Tensor, params: ModelParams, index: int, keep_attn: list | None = None) -> Tensor:
    x = swin_layer(x, params, f"block{index}.0", False, keep_attn)
    return swin_layer(x, params, f"block{index}.1", True, keep_attn)


# -- heads -------------------------------------------------------------------

def heads(z: Tensor, params: ModelParams) -> tuple[Tensor, Tensor]:
    """BH (ReLU, metres) and BF (sigmoid) predictions, each ``(B,)``."""
    B = z.shape[0]
    bh = linear(dc.gelu(linear(z, params, "head_bh.0")), params, "head_bh.1")
    bf = linear(dc.gelu(linear(z, params, "head_bf.0")), params, "head_bf.1")
    return dc.reshape(dc.relu(bh), (B,)), dc.reshape(dc.sigmoid(bf), (B,))


def geoformer_forward(x, params: ModelParams, keep_attn: list | None = None) -> tuple[Tensor, Tensor]:
    cfg = params.config
    t = _check(patch_embed(x, params), "patch_embed")
    for b in range(cfg.blocks):
        t = _check(swin_block(t, params, b, keep_attn), f"block{b}")
    c = cfg.k // 2
    z = dc.slice_(t, (slice(None), c, c))  # extract-center; pooling over one token is the identity
    z = dc.layer_norm(z, params["norm.g"], params["norm.b"])
    bh, bf = heads(z, params)
    return _check(bh, "head_bh"), _check(bf, "head_bf")


# -- CNN baseline --------------------------------------------------------------

def cnn_baseline_forward(x, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Three 3x3 conv stages (stride 1, 2, 2) -> global average pool -> heads."""
    cfg = params.config
    x = _as_input(x)
    P, C = cfg.patch_px, cfg.in_channels
    if x.ndim != 4 or x.shape[1:] != (C, P, P):
        raise dc.ShapeError("cnn_baseline", x.shape, (C, P, P))
    B = x.shape[0]
    t = dc.transpose(x, (0, 2, 3, 1))  # channels-last
    for i in range(len(cfg.cnn_widths)):
        stride = 1 if i == 0 else 2
        t = dc.relu(linear(dc.unfold(t, 3, stride=stride, padding=1), params, f"conv{i}"))
        _check(t, f"conv{i}")
    z = dc.mean(t, axis=(1, 2))
    if cfg.cnn_se:
        # a per-channel gate is constant over space, so gating the pooled vector
        # equals pooling the gated map
        gate = dc.sigmoid(linear(dc.relu(linear(z, params, "se.0")), params, "se.1"))
        z = dc.mul(z, gate)
    z = dc.layer_norm(z, params["norm.g"], params["norm.b"])
    bh, bf = heads(dc.reshape(z, (B, z.shape[-1])), params)
    return _check(bh, "head_bh"), _check(bf, "head_bf")


def forward(x, params: ModelParams) -> tuple[Tensor, Tensor]:
    if params.config.variant == "cnn_baseline":
        return cnn_baseline_forward(x, params)
    return geoformer_forward(x, params)


def predict(x: np.ndarray, params: ModelParams, batch: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Inference without graph recording; returns float64 numpy arrays."""
    bh, bf = [], []
    with no_grad():
        for i in range(0, len(x), batch):
            a, b = forward(x[i:i + batch].astype(params.dtype, copy=False), params)
            bh.append(a.data)
            bf.append(b.data)
    return np.concatenate(bh).astype(np.float64), np.concatenate(bf).astype(np.float64)
