"""Slow, independent reference implementations used as test oracles.

Nothing here imports the code under test except where an oracle needs to
evaluate the model's loss (finite differences).
"""

from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np


# ---------------------------------------------------------------------------
# resampling

def coverage_downsample(img: np.ndarray, factor: Fraction) -> np.ndarray:
    """Per-pixel exact coverage sums with Fractions, rounded half-up."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    out_h = math.ceil(Fraction(h) / factor)
    out_w = math.ceil(Fraction(w) / factor)

    def cover(i, n):
        lo, hi = i * factor, min((i + 1) * factor, Fraction(n))
        res = []
        for j in range(math.floor(lo), math.ceil(hi)):
            ov = min(hi, Fraction(j + 1)) - max(lo, Fraction(j))
            if ov > 0:
                res.append((j, ov))
        return res

    out = np.zeros((out_h, out_w) + img.shape[2:], dtype=np.uint8)
    for oy in range(out_h):
        cy = cover(oy, h)
        for ox in range(out_w):
            cx = cover(ox, w)
            total = sum(a * b for _, a in cy for _, b in cx)
            for ch in np.ndindex(img.shape[2:]):
                acc = Fraction(0)
                for y, a in cy:
                    for x, b in cx:
                        acc += a * b * int(img[(y, x) + ch])
                mean = acc / total
                out[(oy, ox) + ch] = math.floor(mean + Fraction(1, 2))
    return out


# ---------------------------------------------------------------------------
# segmentation / filtering

def brute_otsu(hist) -> int:
    """Lowest threshold maximising exact between-class variance."""
    hist = [int(v) for v in hist]
    total = sum(hist)
    best_t, best = None, Fraction(-1)
    for t in range(256):
        n0 = sum(hist[:t + 1])
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        m0 = Fraction(sum(i * hist[i] for i in range(t + 1)), n0)
        m1 = Fraction(sum(i * hist[i] for i in range(t + 1, 256)), n1)
        var = Fraction(n0 * n1, total * total) * (m0 - m1) ** 2
        if var > best:
            best, best_t = var, t
    return best_t


def dense_correlate(img: np.ndarray, kernel: np.ndarray, clamp: bool = True) -> np.ndarray:
    """Direct 2-D correlation; borders by clamp-to-edge, or interior only."""
    img = np.asarray(img, dtype=np.float64)
    kh, kw = kernel.shape
    ry, rx = kh // 2, kw // 2
    h, w = img.shape
    if not clamp:
        out = np.zeros((h - 2 * ry, w - 2 * rx))
        for y in range(ry, h - ry):
            for x in range(rx, w - rx):
                out[y - ry, x - rx] = np.sum(img[y - ry:y + ry + 1, x - rx:x + rx + 1] * kernel)
        return out
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for dy in range(-ry, ry + 1):
                for dx in range(-rx, rx + 1):
                    yy = min(max(y + dy, 0), h - 1)
                    xx = min(max(x + dx, 0), w - 1)
                    acc += kernel[dy + ry, dx + rx] * img[yy, xx]
            out[y, x] = acc
    return out


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    r = math.ceil(3 * sigma)
    k = np.array([math.exp(-(i * i) / (2 * sigma * sigma)) for i in range(-r, r + 1)])
    return k / k.sum()


# ---------------------------------------------------------------------------
# optimisation

def scalar_adam(theta: float, grads, lr=0.001, b1=0.9, b2=0.999, eps=1e-8) -> list:
    """Trajectory of a single scalar under Adam, plain Python floats."""
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        theta = theta - lr * mh / (math.sqrt(vh) + eps)
        out.append(theta)
    return out


# ---------------------------------------------------------------------------
# evaluation

def brute_f1_threshold(scores, labels) -> float:
    """Sweep every candidate; score > t is positive; ties -> largest t."""
    scores = [float(s) for s in scores]
    labels = [bool(v) for v in labels]
    cands = sorted(set(scores) | {0.0, 1.0})
    best_t, best = None, -1.0
    for t in cands:
        tp = sum(1 for s, y in zip(scores, labels) if s > t and y)
        fp = sum(1 for s, y in zip(scores, labels) if s > t and not y)
        fn = sum(1 for s, y in zip(scores, labels) if s <= t and y)
        f1 = 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)
        if f1 >= best:
            best, best_t = f1, t
    return best_t


def best_train_size(sizes, ratio: float):
    """Smallest achievable subset total >= ratio * total, by enumeration."""
    total = sum(sizes)
    target = ratio * total
    best = None
    for r in range(len(sizes) + 1):
        for combo in itertools.combinations(sizes, r):
            s = sum(combo)
            if s >= target - 1e-9 and (best is None or s < best):
                best = s
    return best


# ---------------------------------------------------------------------------
# gradients

def probe(convnet, params, x, y):
    """Mean BCE and the activation pattern (ReLU signs, max-pool winners)."""
    cache = []
    logits, _ = convnet.forward(params, x, cache)
    loss = float(convnet.bce_loss(convnet.sigmoid(logits), y)[0].mean())
    return loss, [(z > 0, arg) for _, _, z, arg in cache[:-1]]


def same_pattern(a, b) -> bool:
    return all(np.array_equal(za, zb) and np.array_equal(aa, ab) for (za, aa), (zb, ab) in zip(a, b))


def finite_difference_check(convnet, params, x, y, step=1e-3, tol=1e-4, min_step=1e-9):
    """Central differences for every parameter against ``backward``.

    The network is piecewise smooth: a step that moves a ReLU input across
    zero, or changes a max-pool winner, differences across a kink rather than
    the function the analytic gradient describes. Such steps are detected by
    comparing activation patterns at theta +/- h with theta, and the step is
    halved until the pattern is stable on both sides.

    Returns (n_checked, failures, n_restepped, worst_relative_error).
    """
    cache = []
    convnet.forward(params, x, cache)
    _, grads = convnet.backward(params, cache, y)
    _, base = probe(convnet, params, x, y)
    failures, restepped, worst, n = [], 0, 0.0, 0
    for name, arr in params.items():
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            h = step
            while True:
                arr[idx] = old + h
                lp, pp = probe(convnet, params, x, y)
                arr[idx] = old - h
                lm, pm = probe(convnet, params, x, y)
                arr[idx] = old
                if (same_pattern(pp, base) and same_pattern(pm, base)) or h / 2 < min_step:
                    break
                h /= 2
            if h != step:
                restepped += 1
            num = (lp - lm) / (2 * h)
            ana = float(grads[name][idx])
            denom = max(abs(ana), abs(num))
            rel = 0.0 if denom == 0 else abs(ana - num) / denom
            worst = max(worst, rel)
            n += 1
            if rel > tol:
                failures.append((name, idx, ana, num, h))
    return n, failures, restepped, worst
