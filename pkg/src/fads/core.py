"""Per-filter activation statistics of nominal images and deviation scoring."""
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .engine import DimensionError, as_tensor, forward
from .netio import load_graph, load_weights

AGGREGATIONS = ("min", "max", "mean")
SCORINGS = ("max", "percentile90", "l2")
MODEL_VERSION = 1
DEFAULT_SIGMA_FLOOR = 1e-6


class DegenerateModelError(ValueError):
    pass


def resize_bilinear(image, size):
    """Bilinear resize of a ``[C, H, W]`` image to ``size = (h, w)``.

    Sample centres sit at ``(i + 0.5) * scale - 0.5`` in source coordinates,
    clamped to the image, so constants are preserved exactly.
    """
    image = np.asarray(image, dtype=np.float64)
    c, h, w = image.shape
    out_h, out_w = size
    if (out_h, out_w) == (h, w):
        return image.astype(np.float32)

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    top = image[:, y0][:, :, x0] * (1 - fx) + image[:, y0][:, :, x1] * fx
    bottom = image[:, y1][:, :, x0] * (1 - fx) + image[:, y1][:, :, x1] * fx
    out = top * (1 - fy)[:, None] + bottom * fy[:, None]
    return out.astype(np.float32)


def aggregate(activation_map, agg="max"):
    """Summarize one 2-D activation map to a scalar (float64)."""
    m = np.asarray(activation_map)
    if m.size == 0:
        raise ValueError("cannot aggregate an empty activation map")
    if agg == "max":
        return float(m.max())
    if agg == "min":
        return float(m.min())
    if agg == "mean":
        return float(m.sum(dtype=np.float64) / m.size)
    raise ValueError(f"agg must be one of {AGGREGATIONS}, got {agg!r}")


def embed_record(record, agg="max"):
    return np.array([aggregate(m, agg) for m in record.filter_maps])


def embed(image, graph, weights, agg="max", tap="conv"):
    """Aggregated activation of every conv filter, in global filter order."""
    return embed_record(forward(graph, weights, image, tap=tap), agg)


def embed_many(images, graph, weights, agg="max", tap="conv", jobs=None):
    """Embed a sequence of images, preserving order; ``jobs > 1`` uses a thread pool."""
    images = list(images)
    if not jobs or jobs <= 1 or len(images) < 2:
        return [embed(img, graph, weights, agg, tap) for img in images]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda img: embed(img, graph, weights, agg, tap), images))


class RunningMoments:
    """One-pass float64 mean / population variance (Welford, Chan merge)."""

    def __init__(self, dim):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def push(self, x):
        x = np.asarray(x, dtype=np.float64)
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)
        return self

    def merge(self, other):
        n = self.n + other.n
        if n == 0:
            return self
        delta = other.mean - self.mean
        self.mean = self.mean + delta * (other.n / n)
        self.m2 = self.m2 + other.m2 + delta ** 2 * (self.n * other.n / n)
        self.n = n
        return self

    @property
    def std(self):
        return np.sqrt(self.m2 / self.n)


@dataclass(frozen=True)
class FadsModel:
    """Nominal per-filter mean and (floored, population) standard deviation."""

    agg: str
    filter_mean: np.ndarray
    filter_std: np.ndarray
    n_train: int
    input_size: tuple
    sigma_floor: float = DEFAULT_SIGMA_FLOOR
    tap: str = "conv"
    graph_file: str = None
    weights_file: str = None

    def __post_init__(self):
        if self.agg not in AGGREGATIONS:
            raise ValueError(f"agg must be one of {AGGREGATIONS}, got {self.agg!r}")
        if self.filter_mean.shape != self.filter_std.shape or self.filter_mean.ndim != 1:
            raise ValueError("filter_mean and filter_std must be vectors of equal length")
        if self.n_train < 2:
            raise ValueError("a model needs at least two training images")
        if not self.sigma_floor > 0:
            raise ValueError("sigma_floor must be positive")
        if np.any(self.filter_std < 0):
            raise ValueError("filter_std must be non-negative")

    @property
    def n_filters(self):
        return self.filter_mean.shape[0]

    @property
    def effective_std(self):
        return np.maximum(self.filter_std, self.sigma_floor)

    def prepare(self, image):
        """Resize ``image`` to this model's input size."""
        image = as_tensor(image, "image")
        if image.ndim == 2:
            image = image[None]
        c, h, w = self.input_size
        if image.shape[0] != c:
            raise DimensionError(f"image has {image.shape[0]} channels, model expects {c}")
        return resize_bilinear(image, (h, w))

    def check_graph(self, graph):
        if graph.filter_count != self.n_filters:
            raise DimensionError(
                f"model has {self.n_filters} filters but graph {graph.name!r} has {graph.filter_count}")


def _image_size(images):
    shapes = {tuple(np.shape(img)) for img in images}
    if len(shapes) != 1:
        raise DimensionError(f"training images differ in shape: {sorted(shapes)}; pass input_size")
    shape = shapes.pop()
    return (1,) + shape if len(shape) == 2 else shape


def fit(nominal_images, graph, weights, agg="max", sigma_floor=DEFAULT_SIGMA_FLOOR, input_size=None,
        tap="conv", jobs=None):
    """Fit per-filter nominal statistics.

    Images are resized to ``input_size`` (default: their common shape).
    The standard deviation uses denominator ``n``; values below
    ``sigma_floor`` are replaced by it.
    """
    images = list(nominal_images)
    if len(images) < 2:
        raise DegenerateModelError(f"need at least 2 nominal images, got {len(images)}")
    if input_size is None:
        input_size = _image_size(images)
    input_size = tuple(int(v) for v in input_size)
    probe = FadsModel(agg, np.zeros(1), np.zeros(1), 2, input_size, sigma_floor, tap)
    prepared = [probe.prepare(img) for img in images]
    moments = RunningMoments(graph.filter_count)
    for emb in embed_many(prepared, graph, weights, agg, tap, jobs):
        moments.push(emb)
    std = np.maximum(moments.std, sigma_floor)
    return FadsModel(agg, moments.mean.copy(), std, len(images), input_size, float(sigma_floor), tap)


def r_from_embedding(model, embedding):
    embedding = np.asarray(embedding, dtype=np.float64)
    if embedding.shape != model.filter_mean.shape:
        raise DimensionError(f"embedding length {embedding.shape} does not match model ({model.n_filters})")
    return np.abs(embedding - model.filter_mean) / model.effective_std


def check_input_size(model, image):
    shape = np.shape(image)
    if len(shape) == 2:
        shape = (1,) + shape
    if tuple(shape) != tuple(model.input_size):
        raise DimensionError(f"image shape {list(shape)} does not match model input size {list(model.input_size)}")


def r_vector(model, image, graph, weights):
    """Per-filter count of standard deviations from the nominal mean."""
    check_input_size(model, image)
    model.check_graph(graph)
    image = np.asarray(image, dtype=np.float32).reshape(model.input_size)
    return r_from_embedding(model, embed(image, graph, weights, model.agg, model.tap))


def score(r, method="max"):
    """Reduce an r-vector to an anomaly score.

    ``percentile90`` interpolates linearly between order statistics at
    0-indexed position ``0.9 * (len(r) - 1)``; ``l2`` is the Euclidean norm.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.size == 0:
        raise ValueError("cannot score an empty r-vector")
    if method == "max":
        return float(r.max())
    if method == "percentile90":
        return float(np.percentile(r, 90, method="linear"))
    if method == "l2":
        return float(np.sqrt(np.sum(r * r)))
    raise ValueError(f"method must be one of {SCORINGS}, got {method!r}")


@dataclass(frozen=True)
class EnsembleMember:
    model: FadsModel
    graph: object
    weights: dict
    normalizers: dict = field(default_factory=dict)

    def raw_score(self, image, method):
        return score(r_vector(self.model, self.model.prepare(image), self.graph, self.weights), method)


@dataclass(frozen=True)
class EnsembleModel:
    members: tuple
    scoring: str = "max"

    def __post_init__(self):
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        if self.scoring not in SCORINGS:
            raise ValueError(f"scoring must be one of {SCORINGS}, got {self.scoring!r}")
        for i, member in enumerate(self.members):
            if not member.normalizers.get(self.scoring, 0) > 0:
                raise DegenerateModelError(f"member {i} has no positive {self.scoring!r} normalizer")


def ensemble_fit(members, nominal_images, method="max", jobs=None):
    """Attach training-set mean scores to each ``(model, graph, weights)`` member.

    ``nominal_images`` is either one list shared by all members or one list
    per member. Normalizers are computed for every scoring method; the one
    for ``method`` must be positive.
    """
    members = [tuple(m) for m in members]
    if nominal_images and not isinstance(nominal_images[0], (list, tuple)):
        nominal_images = [nominal_images] * len(members)
    if len(nominal_images) != len(members):
        raise ValueError("need one training image list per member")
    fitted = []
    for z, ((model, graph, weights), images) in enumerate(zip(members, nominal_images)):
        if len(images) < 2:
            raise DegenerateModelError(f"member {z}: need at least 2 training images")
        model.check_graph(graph)
        prepared = [model.prepare(img) for img in images]
        embeddings = embed_many(prepared, graph, weights, model.agg, model.tap, jobs)
        rs = [r_from_embedding(model, e) for e in embeddings]
        normalizers = {}
        for a in SCORINGS:
            mean_score = math.fsum(score(r, a) for r in rs) / len(rs)
            if mean_score > 0:
                normalizers[a] = mean_score
        if method not in normalizers:
            raise DegenerateModelError(
                f"member {z}: average training {method!r} score is 0 "
                "(every training image sits on its own mean; the model is degenerate)")
        fitted.append(EnsembleMember(model, graph, weights, normalizers))
    return EnsembleModel(tuple(fitted), method)


def member_scores(ensemble, image, method=None):
    """Normalized score of ``image`` under every member."""
    method = method or ensemble.scoring
    return np.array([m.raw_score(image, method) / m.normalizers[method] for m in ensemble.members])


def ensemble_score(ensemble, image, method=None):
    """Average of member scores, each divided by its training-set mean score."""
    return float(member_scores(ensemble, image, method).mean())


# model files

def _resolve(path, base):
    if path is None or os.path.isabs(path):
        return path
    return os.path.normpath(os.path.join(base, path))


def model_to_dict(model, scoring="max"):
    return {
        "version": MODEL_VERSION,
        "agg": model.agg,
        "scoring": scoring,
        "tap": model.tap,
        "input_size": list(model.input_size),
        "graph_file": model.graph_file,
        "weights_file": model.weights_file,
        "n_train": model.n_train,
        "sigma_floor": model.sigma_floor,
        "filter_mean": [float(v) for v in model.filter_mean],
        "filter_std": [float(v) for v in model.filter_std],
    }


def model_from_dict(d):
    if d.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model file version {d.get('version')!r}")
    return FadsModel(
        agg=d["agg"],
        filter_mean=np.array(d["filter_mean"], dtype=np.float64),
        filter_std=np.array(d["filter_std"], dtype=np.float64),
        n_train=int(d["n_train"]),
        input_size=tuple(d["input_size"]),
        sigma_floor=float(d["sigma_floor"]),
        tap=d.get("tap", "conv"),
        graph_file=d.get("graph_file"),
        weights_file=d.get("weights_file"),
    )


def dumps_canonical(d):
    return json.dumps(d, indent=2, sort_keys=True) + "\n"


def save_model(model, path, scoring="max"):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_canonical(model_to_dict(model, scoring)))


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))


def load_member_network(model, base_dir="."):
    """Load the graph and weights a model file references (relative to ``base_dir``)."""
    if not model.graph_file or not model.weights_file:
        raise ValueError("model does not reference graph/weights files")
    graph = load_graph(_resolve(model.graph_file, base_dir))
    weights = load_weights(_resolve(model.weights_file, base_dir), graph)
    model.check_graph(graph)
    return graph, weights


def save_ensemble(ensemble, path, member_files):
    """Write the ensemble file; ``member_files`` are the already-saved model paths."""
    base = os.path.dirname(os.path.abspath(path))
    d = {
        "version": MODEL_VERSION,
        "scoring": ensemble.scoring,
        "members": [
            {"model_file": os.path.relpath(os.path.abspath(f), base), "normalizers": dict(m.normalizers)}
            for f, m in zip(member_files, ensemble.members)
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_canonical(d))


def load_ensemble(path):
    base = os.path.dirname(os.path.abspath(path))
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    if d.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported ensemble file version {d.get('version')!r}")
    members = []
    for entry in d["members"]:
        model_path = _resolve(entry["model_file"], base)
        model = load_model(model_path)
        graph, weights = load_member_network(model, os.path.dirname(model_path))
        members.append(EnsembleMember(model, graph, weights, dict(entry["normalizers"])))
    return EnsembleModel(tuple(members), d["scoring"])
