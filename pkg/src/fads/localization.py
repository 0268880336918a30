"""Saliency maps from guided backprop of the top-decile r-vector loss, and
region masks from thresholded average pooling of those maps."""
import json
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .core import check_input_size, embed_record, r_from_embedding, resize_bilinear, score
from .engine import abs_backward, backward, forward

DEFAULT_PIXEL_THRESHOLD = 0.5
DEFAULT_WINDOW = 8
DEFAULT_REGION_THRESHOLD = 0.25
TOP_FRACTION = 0.1


@dataclass(frozen=True)
class SaliencyMap:
    values: np.ndarray
    source_score: float


@dataclass(frozen=True)
class RegionMask:
    cells: np.ndarray
    pixel_threshold: float
    window: int
    region_threshold: float

    def cell_of(self, y, x):
        return int(y) // self.window, int(x) // self.window

    def to_pixels(self, shape):
        """Expand cells back to a pixel grid of ``shape``."""
        up = np.repeat(np.repeat(self.cells, self.window, axis=0), self.window, axis=1)
        return up[:shape[0], :shape[1]]

    def params(self):
        return {"pixel_threshold": self.pixel_threshold, "window": self.window,
                "region_threshold": self.region_threshold}


def anomaly_loss(r):
    """Mean square of the largest ``ceil(0.1 * I)`` r-vector entries.

    Returns ``(loss, active)`` where ``active`` lists the selected filter
    indices in ascending order; ties go to the lower index.
    """
    r = np.asarray(r, dtype=np.float64)
    k = max(1, math.ceil(TOP_FRACTION * r.size))
    active = np.sort(np.argsort(-r, kind="stable")[:k])
    return float(np.mean(r[active] ** 2)), active


def loss_gradient(record, model):
    """Seed gradients d(loss)/d(filter map) for the active filters (active set held fixed)."""
    emb = embed_record(record, model.agg)
    r = r_from_embedding(model, emb)
    loss, active = anomaly_loss(r)
    sigma = model.effective_std
    seeds = {}
    for i in active:
        coeff = 2.0 * r[i] * abs_backward(emb[i] - model.filter_mean[i]) / (sigma[i] * len(active))
        if coeff == 0:
            continue
        m = record.filter_maps[i]
        g = np.zeros(m.shape)
        if model.agg == "mean":
            g[...] = coeff / m.size
        else:
            flat = np.argmax(m) if model.agg == "max" else np.argmin(m)
            g.flat[flat] = coeff
        seeds[int(i)] = g
    return loss, r, seeds


def input_gradient(image, model, graph, weights, mode="guided"):
    """Gradient of the anomaly loss w.r.t. the input image."""
    check_input_size(model, image)
    model.check_graph(graph)
    image = np.asarray(image, dtype=np.float32).reshape(model.input_size)
    record = forward(graph, weights, image, tap=model.tap)
    loss, r, seeds = loss_gradient(record, model)
    return backward(record, graph, weights, seeds, mode=mode), loss, r


def normalize_map(raw):
    """Min-max scale to [0, 1]; an all-zero map stays zero, a flat nonzero map becomes ones."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.zeros_like(raw) if hi == 0 else np.ones_like(raw)
    return (raw - lo) / (hi - lo)


def saliency(image, model, graph, weights, method="max", mode="guided"):
    """Per-pixel saliency of ``image`` under ``model``.

    The absolute input gradient is summed over channels and min-max
    normalized.
    """
    grad, _, r = input_gradient(image, model, graph, weights, mode)
    raw = np.abs(grad.astype(np.float64)).sum(axis=0)
    return SaliencyMap(normalize_map(raw), score(r, method))


def region_label(saliency_map, pixel_threshold=DEFAULT_PIXEL_THRESHOLD, window=DEFAULT_WINDOW,
                 region_threshold=DEFAULT_REGION_THRESHOLD):
    """Mark ``window``-sized cells whose fraction of pixels above
    ``pixel_threshold`` exceeds ``region_threshold``.

    Trailing partial windows pool over the pixels they contain.
    """
    values = saliency_map.values if isinstance(saliency_map, SaliencyMap) else np.asarray(saliency_map)
    if not (0 <= pixel_threshold <= 1 and 0 <= region_threshold <= 1):
        raise ValueError("thresholds must lie in [0, 1]")
    if window < 1:
        raise ValueError("window must be positive")
    h, w = values.shape
    if h < window or w < window:
        raise ValueError(f"map {h}x{w} smaller than window {window}")
    rows, cols = np.arange(0, h, window), np.arange(0, w, window)

    def pool(a):
        return np.add.reduceat(np.add.reduceat(a, rows, axis=0), cols, axis=1)

    above = pool((values > pixel_threshold).astype(np.int64))
    counts = pool(np.ones((h, w), dtype=np.int64))
    return RegionMask((above / counts > region_threshold).astype(np.uint8),
                      float(pixel_threshold), int(window), float(region_threshold))


def average_saliency(maps, size):
    """Resize each map to ``size`` and average them, renormalizing to [0, 1]."""
    stacked = [resize_bilinear(np.asarray(m.values)[None], size)[0].astype(np.float64) for m in maps]
    return SaliencyMap(normalize_map(np.mean(stacked, axis=0)), float(np.mean([m.source_score for m in maps])))


def to_uint8(values):
    return np.clip(np.round(255.0 * np.asarray(values, dtype=np.float64)), 0, 255).astype(np.uint8)


def _save_gray(array, path):
    path = str(path)
    fmt = "PPM" if path.lower().endswith((".pgm", ".pnm")) else None
    Image.fromarray(array, mode="L").save(path, format=fmt)


def write_saliency(saliency_map, path):
    """8-bit grayscale PNG or PGM with ``round(255 * saliency)``."""
    _save_gray(to_uint8(saliency_map.values), path)


def write_overlay(image, saliency_map, path, alpha=0.5):
    """Alpha-blend the saliency map onto a single-channel image in [0, 1]."""
    base = np.asarray(image, dtype=np.float64)
    if base.ndim == 3:
        base = base.mean(axis=0)
    _save_gray(to_uint8((1 - alpha) * base + alpha * saliency_map.values), path)


def write_region_mask(mask, path):
    """Cell-resolution PGM (0/255) plus a ``.json`` sidecar with the parameters."""
    path = str(path)
    _save_gray(mask.cells.astype(np.uint8) * 255, path)
    sidecar = path.rsplit(".", 1)[0] + ".json"
    with open(sidecar, "w", encoding="utf-8") as fh:
        json.dump({**mask.params(), "shape": list(mask.cells.shape)}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return sidecar
