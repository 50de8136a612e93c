"""Fused per-sample loops for the field hot path (numba, single threaded).

The MLP kernel takes the first-layer table ``proj`` (cells x hidden), i.e.
the conditioning payload already multiplied by the feature rows of W1, plus
K interpolation taps per sample, so the hidden layer of a sample is a
weighted sum of K table rows. The backward pass only needs the transposed
scatter; the dense parts go through BLAS.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def triplane_frustum_taps(x, fx, fy, cx, cy, width, height, near, far, res, eps):
    n = x.shape[0]
    inside = np.zeros(n, dtype=np.bool_)
    m = 0
    for i in range(n):
        depth = -x[i, 2]
        if depth < near or depth > far:
            continue
        u = (fx * x[i, 0] / depth + cx) * (2.0 / width) - 1.0
        v = (cy - fy * x[i, 1] / depth) * (2.0 / height) - 1.0
        if abs(u) <= 1.0 and abs(v) <= 1.0:
            inside[i] = True
            m += 1
    idx = np.empty((m, 12), dtype=np.int32)
    w = np.empty((m, 12), dtype=np.float64)
    xt = np.empty((m, 3), dtype=np.float64)
    ii = np.empty(3, dtype=np.int64)
    ff = np.empty(3, dtype=np.float64)
    r2 = res * res
    row = 0
    for i in range(n):
        if not inside[i]:
            continue
        depth = min(max(-x[i, 2], near + eps), far - eps)
        xt[row, 0] = (fx * x[i, 0] / depth + cx) * (2.0 / width) - 1.0
        xt[row, 1] = (cy - fy * x[i, 1] / depth) * (2.0 / height) - 1.0
        xt[row, 2] = 2.0 * (depth - near) / (far - near) - 1.0
        for a in range(3):
            pos = (xt[row, a] + 1.0) * 0.5 * (res - 1)
            i0 = int(np.floor(pos))
            if i0 < 0:
                i0 = 0
            elif i0 > res - 2:
                i0 = res - 2
            f = pos - i0
            if f < 0.0:
                f = 0.0
            elif f > 1.0:
                f = 1.0
            ii[a] = i0
            ff[a] = f
        for p in range(3):
            if p == 0:
                a, b = 0, 1
            elif p == 1:
                a, b = 0, 2
            else:
                a, b = 1, 2
            base = p * r2 + ii[a] * res + ii[b]
            fa = ff[a]
            fb = ff[b]
            idx[row, 4 * p] = base
            idx[row, 4 * p + 1] = base + 1
            idx[row, 4 * p + 2] = base + res
            idx[row, 4 * p + 3] = base + res + 1
            w[row, 4 * p] = (1.0 - fa) * (1.0 - fb)
            w[row, 4 * p + 1] = (1.0 - fa) * fb
            w[row, 4 * p + 2] = fa * (1.0 - fb)
            w[row, 4 * p + 3] = fa * fb
        row += 1
    return inside, idx, w, xt


@njit(cache=True, fastmath=True)
def mlp_forward(proj, idx, w, rows, pre_extra, has_extra, b1, w2t, b2, relu, hidden, out,
                rgb, sigma):
    """Hidden activations (kept for backward), raw outputs, and the activated
    color/density written to rows ``rows`` of the full-size outputs."""
    n, k = idx.shape
    hdim = proj.shape[1]
    for i in range(n):
        h = hidden[i]
        for c in range(hdim):
            h[c] = b1[c]
        if has_extra:
            for c in range(hdim):
                h[c] += pre_extra[i, c]
        for t in range(k):
            j = idx[i, t]
            wt = w[i, t]
            for c in range(hdim):
                h[c] += wt * proj[j, c]
        if relu:
            for c in range(hdim):
                h[c] = max(h[c], 0)
        for o in range(4):
            s = b2[o]
            for c in range(hdim):
                s += h[c] * w2t[o, c]
            out[i, o] = s
        r = rows[i]
        for o in range(3):
            rgb[r, o] = 1.0 / (1.0 + np.exp(-out[i, o]))
        z = out[i, 3]
        sigma[r] = max(z, 0.0) + np.log1p(np.exp(-abs(z)))


@njit(cache=True, fastmath=True)
def mlp_backward(idx, w, rows, hidden, out, d_rgb, d_sigma, w2t, relu, d_proj, d_w2t, d_b1,
                 d_b2, g_out, store_g):
    """Accumulate output-layer grads, hidden grads and the tap scatter into d_proj."""
    n, k = idx.shape
    hdim = hidden.shape[1]
    g = np.empty(hdim, dtype=hidden.dtype)
    d_o = np.empty(4, dtype=hidden.dtype)
    for i in range(n):
        r = rows[i]
        for o in range(3):
            y = 1.0 / (1.0 + np.exp(-out[i, o]))
            d_o[o] = d_rgb[r, o] * y * (1.0 - y)
        d_o[3] = d_sigma[r] / (1.0 + np.exp(-out[i, 3]))
        h = hidden[i]
        for c in range(hdim):
            g[c] = 0
        for o in range(4):
            do = d_o[o]
            d_b2[o] += do
            for c in range(hdim):
                g[c] += do * w2t[o, c]
                d_w2t[o, c] += do * h[c]
        if relu:
            for c in range(hdim):
                if h[c] <= 0:
                    g[c] = 0
        for c in range(hdim):
            d_b1[c] += g[c]
        for t in range(k):
            j = idx[i, t]
            wt = w[i, t]
            for c in range(hdim):
                d_proj[j, c] += wt * g[c]
        if store_g:
            for c in range(hdim):
                g_out[i, c] = g[c]


@njit(cache=True)
def adam_update(p, g, m, v, lr, b1, b2, c1, c2, eps, scale):
    """One bias-corrected Adam step on flat arrays, in place."""
    for i in range(p.size):
        gi = g[i] * scale
        m[i] = b1 * m[i] + (1 - b1) * gi
        v[i] = b2 * v[i] + (1 - b2) * (gi * gi)
        if lr != 0:
            p[i] -= (lr / c1) * m[i] / (np.sqrt(v[i] / c2) + eps)
