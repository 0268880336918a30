"""Independent scalar-loop oracles. Nothing here imports the code under test."""
import itertools
import math

import numpy as np


def conv2d_loops(x, kernel, bias, stride, pad):
    c_in, h, w = x.shape
    c_out, _, kh, kw = kernel.shape
    h_out = (h + 2 * pad - kh) // stride + 1
    w_out = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((c_out, h_out, w_out))
    for o in range(c_out):
        for y in range(h_out):
            for xx in range(w_out):
                acc = float(bias[o])
                for c in range(c_in):
                    for u in range(kh):
                        for v in range(kw):
                            iy, ix = y * stride - pad + u, xx * stride - pad + v
                            if 0 <= iy < h and 0 <= ix < w:
                                acc += float(x[c, iy, ix]) * float(kernel[o, c, u, v])
                out[o, y, xx] = acc
    return out


def maxpool_loops(x, window, stride):
    c, h, w = x.shape
    h_out, w_out = (h - window) // stride + 1, (w - window) // stride + 1
    out = np.zeros((c, h_out, w_out), dtype=x.dtype)
    where = np.zeros((c, h_out, w_out, 2), dtype=int)
    for ch in range(c):
        for y in range(h_out):
            for xx in range(w_out):
                best, pos = None, None
                for u in range(window):
                    for v in range(window):
                        val = x[ch, y * stride + u, xx * stride + v]
                        if best is None or val > best:
                            best, pos = val, (y * stride + u, xx * stride + v)
                out[ch, y, xx] = best
                where[ch, y, xx] = pos
    return out, where


def batchnorm_loops(x, mean, var, gamma, beta, eps):
    out = np.zeros(x.shape)
    for c, y, xx in itertools.product(*map(range, x.shape)):
        out[c, y, xx] = (float(x[c, y, xx]) - float(mean[c])) / math.sqrt(float(var[c]) + eps) * float(gamma[c]) + float(beta[c])
    return out


def two_pass_stats(rows):
    """Population mean/std per column with explicit float64 sums."""
    rows = [[float(v) for v in r] for r in rows]
    n, dim = len(rows), len(rows[0])
    mean = [sum(r[i] for r in rows) / n for i in range(dim)]
    std = [math.sqrt(sum((r[i] - mean[i]) ** 2 for r in rows) / n) for i in range(dim)]
    return np.array(mean), np.array(std)


def auc_all_pairs(scores, labels):
    pos = [s for s, lab in zip(scores, labels) if lab == 1]
    neg = [s for s, lab in zip(scores, labels) if lab == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def window_count_mask(saliency, pixel_threshold, n, region_threshold):
    h, w = saliency.shape
    rows, cols = -(-h // n), -(-w // n)
    mask = np.zeros((rows, cols), dtype=np.uint8)
    for r in range(rows):
        for c in range(cols):
            cells = [saliency[y, x] > pixel_threshold
                     for y in range(r * n, min(h, r * n + n))
                     for x in range(c * n, min(w, c * n + n))]
            mask[r, c] = sum(cells) / len(cells) > region_threshold
    return mask
