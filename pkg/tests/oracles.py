"""Brute-force loop implementations used as independent references in tests.

Everything here works on plain float64 numpy arrays with explicit Python
loops, sharing no code with the package under test.
"""

import math

import numpy as np


def conv2d_loops(x, w, b=None, stride=1, padding=0, dilation=1):
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    ho = (h + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(cin):
                        for ky in range(k):
                            for kx in range(k):
                                iy = y * stride - padding + ky * dilation
                                ix = xx * stride - padding + kx * dilation
                                if 0 <= iy < h and 0 <= ix < wd:
                                    acc += float(x[i, c, iy, ix]) * float(w[o, c, ky, kx])
                    out[i, o, y, xx] = acc
    return out


def maxpool_loops(x, kh, kw=None):
    kw = kh if kw is None else kw
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // kh, w // kw))
    for i in range(n):
        for ch in range(c):
            for y in range(h // kh):
                for xx in range(w // kw):
                    best = -math.inf
                    for dy in range(kh):
                        for dx in range(kw):
                            best = max(best, float(x[i, ch, y * kh + dy, xx * kw + dx]))
                    out[i, ch, y, xx] = best
    return out


def cosine_loops(t, h, eps=1e-8):
    """Per-location ``t.h / (|t||h| + eps)`` written out as scalar sums."""
    n, c, hh, ww = t.shape
    out = np.zeros((n, 1, hh, ww))
    for i in range(n):
        for y in range(hh):
            for x in range(ww):
                dot = nt = nh = 0.0
                for ch in range(c):
                    a, b = float(t[i, ch, y, x]), float(h[i, ch, y, x])
                    dot += a * b
                    nt += a * a
                    nh += b * b
                out[i, 0, y, x] = dot / (math.sqrt(nt) * math.sqrt(nh) + eps)
    return out


def intra_cos_loops(T, H):
    return sum(float(np.sum(1.0 - cosine_loops(t, h))) for t, h in zip(T, H))


def intra_l2_loops(T, H):
    total = 0.0
    for t, h in zip(T, H):
        n, c, hh, ww = t.shape
        acc = 0.0
        for i in range(n):
            for y in range(hh):
                for x in range(ww):
                    acc += sum((float(h[i, ch, y, x]) - float(t[i, ch, y, x])) ** 2 for ch in range(c))
        total += acc / (hh * ww)
    return total


def fsp_loops(f1, f2):
    n, m, h, w = f1.shape
    k = f2.shape[1]
    out = np.zeros((n, m, k))
    for i in range(n):
        for a in range(m):
            for b in range(k):
                acc = 0.0
                for y in range(h):
                    for x in range(w):
                        acc += float(f1[i, a, y, x]) * float(f2[i, b, y, x])
                out[i, a, b] = acc / (h * w)
    return out


def inter_loops(T, H, pairs=None):
    rh, rw = T[-1].shape[2], T[-1].shape[3]

    def resize(f):
        return maxpool_loops(f, f.shape[2] // rh, f.shape[3] // rw)

    rt = [resize(t) for t in T]
    rs = [resize(h) for h in H]
    if pairs is None:
        pairs = [(a, b) for a in range(len(T)) for b in range(a + 1, len(T))]
    total = 0.0
    for a, b in pairs:
        d = fsp_loops(rs[a], rs[b]) - fsp_loops(rt[a], rt[b])
        total += float(np.sum(d * d))
    return total


def map_loss_loops(ms, m, mt, use_hard=True, use_soft=True):
    total = 0.0
    for flag, target in ((use_hard, m), (use_soft, mt)):
        if flag:
            for a, b in zip(np.ravel(ms), np.ravel(target)):
                total += (float(a) - float(b)) ** 2
    return total


def knn_mean_distances(points, k=3):
    """Mean distance to the ``k`` nearest other points by full pairwise search."""
    out = []
    for i, (xi, yi) in enumerate(points):
        d = sorted(math.hypot(xi - xj, yi - yj) for j, (xj, yj) in enumerate(points) if j != i)
        near = d[:k]
        out.append(sum(near) / len(near))
    return np.array(out)


def gaussian_stamp_loops(x, y, sigma, height, width):
    """Truncated, in-image-renormalised Gaussian centred at pixel coords (x, y)."""
    r = max(1, math.ceil(4 * sigma))
    out = np.zeros((height, width))
    cx, cy = int(math.floor(x)), int(math.floor(y))
    for row in range(max(0, cy - r), min(height, cy + r + 1)):
        for col in range(max(0, cx - r), min(width, cx + r + 1)):
            dx = col + 0.5 - x
            dy = row + 0.5 - y
            out[row, col] = math.exp(-(dx * dx + dy * dy) / (2 * sigma * sigma))
    return out / out.sum()


def sum_pool_loops(a, f):
    h, w = a.shape
    out = np.zeros((h // f, w // f))
    for y in range(h // f):
        for x in range(w // f):
            out[y, x] = sum(float(a[y * f + dy, x * f + dx]) for dy in range(f) for dx in range(f))
    return out


def embed_loops(s, w, b):
    n, cin, h, wd = s.shape
    cout = w.shape[0]
    out = np.zeros((n, cout, h, wd))
    for i in range(n):
        for y in range(h):
            for x in range(wd):
                for o in range(cout):
                    out[i, o, y, x] = float(b[o]) + sum(float(w[o, c, 0, 0]) * float(s[i, c, y, x]) for c in range(cin))
    return out
