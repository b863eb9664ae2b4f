"""Independent reference implementations shared by the unit and acceptance tests."""

import math

import numpy as np

from geoformer.grid_labeling import BuildingPolygon


def rect(x0, y0, x1, y1, h=math.nan):
    return BuildingPolygon(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], float), h)


def lattice_oracle(rects, grid, step=0.1):
    """Rasterise each rectangle on a ``step``-metre lattice of sample points.

    Points sit at cell-local offsets (i + 0.5) * step; area of a building in
    a cell = (#points inside) * step**2.
    """
    n = int(round(grid.cell_size / step))
    offs = (np.arange(n) + 0.5) * step
    lam = np.zeros((grid.rows, grid.cols))
    ha = np.zeros_like(lam)
    wh = np.zeros_like(lam)
    for (x0, y0, x1, y1, h) in rects:
        for r in range(grid.rows):
            for c in range(grid.cols):
                bx0, by0, _, _ = grid.cell_bounds(r, c)
                xs = bx0 + offs
                ys = by0 + offs
                nx = np.count_nonzero((xs >= x0) & (xs <= x1))
                ny = np.count_nonzero((ys >= y0) & (ys <= y1))
                a = nx * ny * step * step
                lam[r, c] += a / grid.cell_size**2
                if not math.isnan(h):
                    ha[r, c] += a
                    wh[r, c] += a * h
    with np.errstate(invalid="ignore"):
        hav = np.where(ha > 0, wh / np.where(ha > 0, ha, 1), np.nan)
    return lam, hav


def random_rect_set(rng, grid):
    out = []
    for _ in range(rng.integers(1, 7)):
        # decimetre-aligned corners keep the lattice counts exact
        w, hgt = rng.integers(20, 1500, size=2) / 10.0
        x0 = grid.x0 + rng.integers(-200, grid.cols * 1000) / 10.0
        y0 = grid.y0 - grid.rows * 100 + rng.integers(-200, grid.rows * 1000) / 10.0
        h = math.nan if rng.random() < 0.15 else float(rng.integers(20, 800)) / 10.0
        out.append((x0, y0, x0 + w, y0 + hgt, h))
    return out


def dense_attention(h, params, prefix, w):
    """Loop-level multi-head self-attention over all tokens of one window."""
    cfg = params.config
    B, k, _, D = h.shape
    H = cfg.n_heads
    dh = D // H
    Wqkv, bqkv = params[f"{prefix}.qkv.w"].data, params[f"{prefix}.qkv.b"].data
    Wp, bp = params[f"{prefix}.proj.w"].data, params[f"{prefix}.proj.b"].data
    table = params[f"{prefix}.relpos"].data
    pos = [(i, j) for i in range(k) for j in range(k)]
    out = np.zeros_like(h)
    for b in range(B):
        X = h[b].reshape(k * k, D)
        Q, K, V = X @ Wqkv[:, :D] + bqkv[:D], X @ Wqkv[:, D:2 * D] + bqkv[D:2 * D], X @ Wqkv[:, 2 * D:] + bqkv[2 * D:]
        heads = []
        for hd in range(H):
            sl = slice(hd * dh, (hd + 1) * dh)
            S = np.empty((k * k, k * k))
            for a, (ya, xa) in enumerate(pos):
                for c, (yc, xc) in enumerate(pos):
                    rel = (ya - yc + w - 1) * (2 * w - 1) + (xa - xc + w - 1)
                    S[a, c] = Q[a, sl] @ K[c, sl] / np.sqrt(dh) + table[rel, hd]
            S = np.exp(S - S.max(axis=1, keepdims=True))
            S /= S.sum(axis=1, keepdims=True)
            heads.append(S @ V[:, sl])
        out[b] = (np.concatenate(heads, axis=1) @ Wp + bp).reshape(k, k, D)
    return out


def wrap_separated(k, w, s):
    """(window, query, key) triples that the cyclic shift placed side by side
    although they are not neighbours in the original grid (or are padding)."""
    n = -(-k // w) * w
    bad = []
    nw = n // w
    for wr in range(nw):
        for wc in range(nw):
            cells = [(wr * w + i, wc * w + j) for i in range(w) for j in range(w)]
            for a, (ya, xa) in enumerate(cells):
                for c, (yc, xc) in enumerate(cells):
                    pad = max(ya, xa, yc, xc) >= k
                    if pad:
                        ok = a == c or (ya >= k or xa >= k) and (yc >= k or xc >= k) and \
                            ((ya >= k) == (yc >= k)) and ((xa >= k) == (xc >= k))
                    else:
                        oa = ((ya + s) % k, (xa + s) % k)
                        oc = ((yc + s) % k, (xc + s) % k)
                        ok = (oa[0] - oc[0], oa[1] - oc[1]) == (ya - yc, xa - xc)
                    if not ok:
                        bad.append((wr * nw + wc, a, c))
    return bad
