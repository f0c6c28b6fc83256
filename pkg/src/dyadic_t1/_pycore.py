"""numpy fallback for the compiled cell-Galerkin kernels (same signatures)."""
import numpy as np


def _hilbert_unit(d):
    d = np.asarray(d, dtype=float)
    out = np.zeros_like(d)
    a = np.abs(d)
    one = a == 1
    big = a > 1
    out[one] = 2.0 * np.log(2.0)
    t = a[big]
    out[big] = t * np.log1p(-1.0 / (t * t)) + np.log1p(2.0 / (t - 1.0))
    return np.sign(d) * out


def hilbert_cells(x0, y0, w, nx, ny, row0=0, row1=-1):
    shift = (x0 - y0) / w
    s = int(round(shift))
    if abs(shift - s) > 1e-12:
        raise ValueError("x and y cell grids must be aligned")
    if row1 < 0:
        row1 = nx
    lo, hi = s + row0 - (ny - 1), s + row1 - 1
    tab = w * _hilbert_unit(np.arange(lo, hi + 1))
    a = np.arange(row0, row1)[:, None]
    b = np.arange(ny)[None, :]
    return tab[s + a - b - lo]


def _compact(u, v, p, q, sigma):
    au = np.abs(u)
    if p == 2.0 and q == 4.0:
        g = u / (1.0 + (u * u) ** 2)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.sign(u) * au ** (p - 1.0) / (1.0 + au ** q)
        g = np.where(u == 0.0, 0.0, g)
    return g * np.exp(-v * v / (4.0 * sigma * sigma))


def compact_cells(x0, y0, w, nx, ny, p, q, sigma, nodes, weights, cutoff, row0=0, row1=-1):
    if row1 < 0:
        row1 = nx
    nodes = np.asarray(nodes, dtype=float)
    weights = np.asarray(weights, dtype=float)
    P = len(nodes)
    h = 0.5 * w
    out = np.zeros((row1 - row0, ny))
    xs_all = x0 + np.arange(nx)[:, None] * w + h * (nodes[None, :] + 1.0)
    ys_all = y0 + np.arange(ny)[:, None] * w + h * (nodes[None, :] + 1.0)
    yb = y0 + np.arange(ny) * w
    block = 16
    for a0 in range(row0, row1, block):
        a1 = min(a0 + block, row1)
        xa = x0 + np.arange(a0, a1) * w
        # columns that can reach within the cutoff band for some row of the block
        vmin = np.abs(xa[:, None] + yb[None, :] + w) - w
        cols = np.nonzero((vmin.clip(min=0.0) <= cutoff).any(axis=0))[0]
        if cols.size == 0:
            continue
        xs = xs_all[a0:a1]                    # (B, P)
        ys = ys_all[cols]                     # (C, P)
        U = xs[:, None, :, None] - ys[None, :, None, :]
        V = xs[:, None, :, None] + ys[None, :, None, :]
        F = _compact(U, V, p, q, sigma)
        val = np.einsum("bcij,i,j->bc", F, weights, weights) * h * h
        keep = vmin[:, cols].clip(min=0.0) <= cutoff
        out[a0 - row0:a1 - row0, cols] = np.where(keep, val, 0.0)
    return out


def compact_eval(u, v, p, q, sigma):
    return _compact(np.asarray(u, dtype=float), np.asarray(v, dtype=float), p, q, sigma)
