"""Independent reference implementations used by the tests.

Everything here is written as plain per-pixel loops over Python floats, so it
shares no vectorised code path with the package.
"""

import math

import numpy as np


def brute_force_warp(rgb, depth, rotation, translation, fx, fy, cx, cy):
    """Splat every valid pixel to its nearest target pixel; nearest depth wins,
    ties go to the earlier source pixel in row-major order."""
    h, w = depth.shape
    r = [[float(rotation[i][j]) for j in range(3)] for i in range(3)]
    t = [float(v) for v in translation]
    best = {}
    for v in range(h):
        for u in range(w):
            d = float(depth[v, u])
            if not math.isfinite(d):
                continue
            x = (u - cx) * d / fx
            y = (v - cy) * d / fy
            xn = r[0][0] * x + r[0][1] * y + r[0][2] * d + t[0]
            yn = r[1][0] * x + r[1][1] * y + r[1][2] * d + t[1]
            zn = r[2][0] * x + r[2][1] * y + r[2][2] * d + t[2]
            if not zn > 0:
                continue
            pu = math.floor(fx * xn / zn + cx + 0.5)
            pv = math.floor(fy * yn / zn + cy + 0.5)
            if not (0 <= pu < w and 0 <= pv < h):
                continue
            key = (pv, pu)
            cand = (zn, v * w + u)
            if key not in best or cand < best[key]:
                best[key] = cand
    out_rgb = np.zeros((h, w, 3))
    out_depth = np.full((h, w), np.nan)
    out_mask = np.zeros((h, w), dtype=np.uint8)
    for (pv, pu), (zn, s) in best.items():
        out_rgb[pv, pu] = rgb[s // w, s % w]
        out_depth[pv, pu] = zn
        out_mask[pv, pu] = 1
    return out_rgb, out_depth, out_mask


def correlate_same(x, w, b):
    """'Same'-padded cross-correlation of one NCHW batch, by explicit loops over taps."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((n, o, h, wd))
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i:i + h, j:j + wd]
            out += np.einsum("nchw,oc->nohw", patch, w[:, :, i, j])
    return out + b[None, :, None, None]


def ssim_constant(a: float, b: float, c1: float, c2: float) -> float:
    """SSIM of two constant images: the structure term is c2 / c2 = 1."""
    return (2 * a * b + c1) / (a * a + b * b + c1)


def ddpm_posterior_mean(z_t, z0, t, betas):
    """Mean of q(z_{t-1} | z_t, z_0) from the products of the alphas, computed by loops."""
    alphas = [1.0 - float(bb) for bb in betas]
    abar = [1.0]
    for a in alphas[1:]:
        abar.append(abar[-1] * a)
    c0 = math.sqrt(abar[t - 1]) * float(betas[t]) / (1.0 - abar[t])
    ct = math.sqrt(alphas[t]) * (1.0 - abar[t - 1]) / (1.0 - abar[t])
    return c0 * z0 + ct * z_t


def ring_fill(values, known, depth):
    """Grow known pixels into holes one 4-neighbour ring per pass; a new pixel
    copies the deepest filled neighbour, first of up, down, left, right on ties."""
    h, w = known.shape
    val = [[values[y][x] if known[y][x] else None for x in range(w)] for y in range(h)]
    dep = [[float(depth[y][x]) if known[y][x] else None for x in range(w)] for y in range(h)]
    while True:
        updates = []
        for y in range(h):
            for x in range(w):
                if dep[y][x] is not None:
                    continue
                best = None
                for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w and dep[yy][xx] is not None:
                        if best is None or dep[yy][xx] > best[0]:
                            best = (dep[yy][xx], val[yy][xx])
                if best is not None:
                    updates.append((y, x, best))
        if not updates:
            return val
        for y, x, (d, v) in updates:
            dep[y][x], val[y][x] = d, v
