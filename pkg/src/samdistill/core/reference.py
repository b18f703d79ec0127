"""Slow scalar-loop reference oracles.

Each function here recomputes a quantity from its defining formula with
explicit Python loops in float64, sharing no code with the vectorized
implementations they check.
"""

from __future__ import annotations

import math

import numpy as np


def psnr_loop(pred, target, cap: float = 100.0) -> float:
    p = np.asarray(pred, dtype=np.float64).ravel().tolist()
    t = np.asarray(target, dtype=np.float64).ravel().tolist()
    total = 0.0
    for a, b in zip(p, t):
        total += (a - b) * (a - b)
    mse = total / len(p)
    if mse < 1e-10:
        return cap
    return 10.0 * math.log10(1.0 / mse)


def ssim_loop(pred, target, win_size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.ndim == 2:
        pred, target = pred[None], target[None]
    half = (win_size - 1) / 2.0
    weights = [[math.exp(-((i - half) ** 2 + (j - half) ** 2) / (2 * sigma * sigma)) for j in range(win_size)] for i in range(win_size)]
    wsum = sum(sum(r) for r in weights)
    weights = [[v / wsum for v in r] for r in weights]
    c1, c2 = k1 * k1, k2 * k2
    per_channel = []
    for x, y in zip(pred, target):
        h, w = x.shape
        vals = []
        for r0 in range(h - win_size + 1):
            for s0 in range(w - win_size + 1):
                mx = my = 0.0
                for i in range(win_size):
                    for j in range(win_size):
                        mx += weights[i][j] * x[r0 + i, s0 + j]
                        my += weights[i][j] * y[r0 + i, s0 + j]
                vx = vy = cxy = 0.0
                for i in range(win_size):
                    for j in range(win_size):
                        dx = x[r0 + i, s0 + j] - mx
                        dy = y[r0 + i, s0 + j] - my
                        vx += weights[i][j] * dx * dx
                        vy += weights[i][j] * dy * dy
                        cxy += weights[i][j] * dx * dy
                vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
        per_channel.append(sum(vals) / len(vals))
    return sum(per_channel) / len(per_channel)


def smooth_l1_loop(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel().tolist()
    b = np.asarray(b, dtype=np.float64).ravel().tolist()
    total = 0.0
    for x, y in zip(a, b):
        d = abs(x - y)
        total += 0.5 * d * d if d <= 1.0 else d - 0.5
    return total / len(a)


def relation_loop(vectors) -> np.ndarray:
    """Pairwise cosine similarity of a list of 1-D vectors."""
    vecs = [np.asarray(v, dtype=np.float64).ravel().tolist() for v in vectors]
    n = len(vecs)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            dot = ni = nj = 0.0
            for p, q in zip(vecs[i], vecs[j]):
                dot += p * q
                ni += p * p
                nj += q * q
            out[i, j] = dot / (math.sqrt(ni) * math.sqrt(nj))
    return out


def sgr_loop(r1, r2) -> float:
    r1 = np.asarray(r1, dtype=np.float64)
    r2 = np.asarray(r2, dtype=np.float64)
    n = r1.shape[0]
    total = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                total += math.sqrt((r1[i, j] - r2[i, j]) ** 2)
    return total / (n * n - n)


def nearest_resize_loop(mask, h: int, w: int) -> np.ndarray:
    mask = np.asarray(mask)
    H, W = mask.shape
    out = np.zeros((h, w), dtype=bool)
    for i in range(h):
        for j in range(w):
            out[i, j] = bool(mask[int(math.floor(i * H / h)), int(math.floor(j * W / w))])
    return out
