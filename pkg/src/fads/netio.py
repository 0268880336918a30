"""Network description and weight file formats, plus the seeded reference net.

Graph files are JSON::

    {"name": "refnet", "input": [1, null, null],
     "layers": [{"id": "conv1", "kind": "conv2d", "out": 8, "kh": 3, "kw": 3,
                 "stride": 1, "pad": 1, "inputs": ["input"]}, ...]}

A ``null`` spatial extent means the graph accepts any size that propagates to
positive extents. ``inputs`` defaults to the previous layer (or ``"input"``).

Weight files are little-endian binary: magic ``FADS``, u32 version, u32 entry
count, then per entry u16 name length, UTF-8 name ``<layer-id>.<param>``,
u8 rank, u32 extents, float32 values.
"""
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .rng import SplitMix64

KINDS = ("conv2d", "relu", "maxpool", "batchnorm", "add", "gap", "flatten", "dense")
INPUT_ID = "input"
MAGIC = 0x46414453
VERSION = 1

_KIND_PARAMS = {
    "conv2d": {"out": None, "kh": None, "kw": None, "stride": 1, "pad": 0},
    "maxpool": {"window": None, "stride": None},
    "batchnorm": {"eps": 1e-5},
    "dense": {"out": None},
}


class GraphError(ValueError):
    """Invalid network description; ``layer`` names the offending layer when known."""

    def __init__(self, message, layer=None):
        if layer is not None:
            message = f"layer {layer!r}: {message}"
        super().__init__(message)
        self.layer = layer


class WeightFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str
    params: dict = field(default_factory=dict)
    inputs: tuple = ()

    def __post_init__(self):
        params = dict(_KIND_PARAMS.get(self.kind, {}))
        params.update(self.params)
        if self.kind == "maxpool" and params.get("stride") is None:
            params["stride"] = params.get("window")
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "inputs", tuple(self.inputs))

    def to_dict(self):
        d = {"id": self.id, "kind": self.kind}
        d.update(self.params)
        d["inputs"] = list(self.inputs)
        return d


@dataclass(frozen=True)
class NetworkGraph:
    name: str
    input_spec: tuple
    layers: tuple

    def __post_init__(self):
        validate_graph(self)

    @property
    def conv_layers(self):
        return [layer for layer in self.layers if layer.kind == "conv2d"]

    @property
    def filter_count(self):
        return sum(layer.params["out"] for layer in self.conv_layers)

    def filter_ranges(self):
        """Map conv layer id -> (start, stop) global filter index range."""
        ranges, start = {}, 0
        for layer in self.conv_layers:
            stop = start + layer.params["out"]
            ranges[layer.id] = (start, stop)
            start = stop
        return ranges

    def layer(self, layer_id):
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise KeyError(layer_id)

    def infer_shapes(self, input_shape=None):
        """Propagate shapes; ``None`` extents stay symbolic."""
        return infer_shapes(self, input_shape)

    def to_dict(self):
        return {
            "name": self.name,
            "input": list(self.input_spec),
            "layers": [layer.to_dict() for layer in self.layers],
        }


def _conv_extent(n, k, stride, pad):
    return None if n is None else (n + 2 * pad - k) // stride + 1


def infer_shapes(graph, input_shape=None):
    shape_in = tuple(graph.input_spec if input_shape is None else input_shape)
    shapes = {INPUT_ID: shape_in}
    for layer in graph.layers:
        ins = [shapes[i] for i in layer.inputs]
        x = ins[0]
        p = layer.params
        kind = layer.kind
        if kind in ("conv2d", "maxpool", "batchnorm", "gap") and len(x) != 3:
            raise GraphError(f"{kind} needs a [C,H,W] input, got {list(x)}", layer.id)
        if kind == "conv2d":
            h = _conv_extent(x[1], p["kh"], p["stride"], p["pad"])
            w = _conv_extent(x[2], p["kw"], p["stride"], p["pad"])
            out = (p["out"], h, w)
        elif kind == "maxpool":
            h = _conv_extent(x[1], p["window"], p["stride"], 0)
            w = _conv_extent(x[2], p["window"], p["stride"], 0)
            out = (x[0], h, w)
        elif kind in ("relu", "batchnorm"):
            out = x
        elif kind == "add":
            if ins[0] != ins[1]:
                raise GraphError(f"add inputs differ in shape: {list(ins[0])} vs {list(ins[1])}", layer.id)
            out = x
        elif kind == "gap":
            out = (x[0],)
        elif kind == "flatten":
            out = (None,) if any(e is None for e in x) else (math.prod(x),)
        elif kind == "dense":
            if len(x) != 1:
                raise GraphError(f"dense needs a flat input, got {list(x)}", layer.id)
            out = (p["out"],)
        if any(e is not None and e < 1 for e in out):
            raise GraphError(f"non-positive output extent {list(out)}", layer.id)
        shapes[layer.id] = out
    return shapes


def validate_graph(graph):
    if len(graph.input_spec) != 3 or not isinstance(graph.input_spec[0], int) or graph.input_spec[0] < 1:
        raise GraphError(f"input must be [c, h, w] with c >= 1, got {list(graph.input_spec)}")
    if not graph.layers:
        raise GraphError("graph has no layers")
    seen = {INPUT_ID}
    consumed = set()
    for layer in graph.layers:
        if layer.kind not in KINDS:
            raise GraphError(f"unsupported kind {layer.kind!r}", layer.id)
        if layer.id in seen:
            raise GraphError("duplicate layer id", layer.id)
        n_inputs = 2 if layer.kind == "add" else 1
        if len(layer.inputs) != n_inputs:
            raise GraphError(f"{layer.kind} takes exactly {n_inputs} input(s)", layer.id)
        for ref in layer.inputs:
            if ref not in seen:
                raise GraphError(f"input {ref!r} is not an earlier layer (graph must be a DAG in listed order)", layer.id)
            consumed.add(ref)
        for name, default in _KIND_PARAMS.get(layer.kind, {}).items():
            value = layer.params.get(name, default)
            if value is None:
                raise GraphError(f"missing parameter {name!r}", layer.id)
        for name in ("out", "kh", "kw", "stride", "window"):
            if name in layer.params and (not isinstance(layer.params[name], int) or layer.params[name] < 1):
                raise GraphError(f"{name} must be a positive integer", layer.id)
        if "pad" in layer.params and (not isinstance(layer.params["pad"], int) or layer.params["pad"] < 0):
            raise GraphError("pad must be a non-negative integer", layer.id)
        seen.add(layer.id)
    dangling = [layer.id for layer in graph.layers[:-1] if layer.id not in consumed]
    if dangling:
        raise GraphError(f"graph must have a single output; unconsumed layers {dangling}")
    infer_shapes(graph)


def _layer_from_dict(d, previous):
    d = dict(d)
    try:
        layer_id = d.pop("id")
        kind = d.pop("kind")
    except KeyError as exc:
        raise GraphError(f"layer entry missing {exc.args[0]!r}") from None
    inputs = tuple(d.pop("inputs", [previous]))
    return LayerSpec(layer_id, kind, d, inputs)


def graph_from_dict(d):
    layers, previous = [], INPUT_ID
    for entry in d.get("layers", []):
        layer = _layer_from_dict(entry, previous)
        layers.append(layer)
        previous = layer.id
    spec = d.get("input")
    if spec is None:
        raise GraphError("graph file missing 'input'")
    return NetworkGraph(d.get("name", ""), tuple(spec), tuple(layers))


def load_graph(path):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphError(f"{path}: JSON parse error at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return graph_from_dict(d)


def save_graph(graph, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(graph.to_dict(), fh, indent=2)
        fh.write("\n")


def expected_parameters(graph):
    """Map ``<layer>.<param>`` -> expected shape (``None`` extents unknown until run time)."""
    shapes = infer_shapes(graph)
    expected = {}
    for layer in graph.layers:
        p = layer.params
        x = shapes[layer.inputs[0]]
        if layer.kind == "conv2d":
            expected[f"{layer.id}.kernel"] = (p["out"], x[0], p["kh"], p["kw"])
            expected[f"{layer.id}.bias"] = (p["out"],)
        elif layer.kind == "batchnorm":
            for name in ("mean", "var", "gamma", "beta"):
                expected[f"{layer.id}.{name}"] = (x[0],)
        elif layer.kind == "dense":
            expected[f"{layer.id}.weight"] = (p["out"], x[0])
            expected[f"{layer.id}.bias"] = (p["out"],)
    return expected


def check_weights(graph, weights):
    """Shape/finiteness check of a parameter mapping against ``graph``; returns a frozen copy."""
    bound = {}
    for name, shape in expected_parameters(graph).items():
        if name not in weights:
            raise WeightFormatError(f"missing parameter {name!r}")
        arr = np.ascontiguousarray(weights[name], dtype=np.float32)
        if arr.ndim != len(shape) or any(e is not None and e != a for e, a in zip(shape, arr.shape)):
            raise WeightFormatError(
                f"parameter {name!r} has shape {list(arr.shape)}, graph expects {list(shape)}")
        if not np.all(np.isfinite(arr)):
            raise WeightFormatError(f"parameter {name!r} contains non-finite values")
        if name.endswith(".var") and np.any(arr < 0):
            raise WeightFormatError(f"parameter {name!r} has negative variance")
        arr.setflags(write=False)
        bound[name] = arr
    return bound


def save_weights(weights, path):
    chunks = [struct.pack("<III", MAGIC, VERSION, len(weights))]
    for name in sorted(weights):
        arr = np.asarray(weights[name], dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        self.need(size)
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return values

    def need(self, size):
        if self.pos + size > len(self.data):
            raise WeightFormatError(
                f"truncated weight file: expected at least {self.pos + size} bytes, got {len(self.data)}")

    def raw(self, size):
        self.need(size)
        out = self.data[self.pos:self.pos + size]
        self.pos += size
        return out


def read_weight_file(path):
    """Parse a weight file into ``{name: float32 array}`` without graph checks."""
    with open(path, "rb") as fh:
        data = fh.read()
    reader = _Reader(data)
    magic, version, count = reader.take("<III")
    if magic != MAGIC:
        raise WeightFormatError(f"bad magic 0x{magic:08x}, expected 0x{MAGIC:08x}")
    if version != VERSION:
        raise WeightFormatError(f"unsupported weight file version {version}")
    weights = {}
    for _ in range(count):
        (name_len,) = reader.take("<H")
        name = reader.raw(name_len).decode("utf-8")
        (rank,) = reader.take("<B")
        extents = reader.take(f"<{rank}I")
        n = math.prod(extents)
        values = np.frombuffer(reader.raw(4 * n), dtype="<f4").astype(np.float32).reshape(extents)
        weights[name] = values
    if reader.pos != len(data):
        raise WeightFormatError(f"trailing data: expected {reader.pos} bytes, got {len(data)}")
    return weights


def load_weights(path, graph):
    return check_weights(graph, read_weight_file(path))


REFERENCE_LAYERS = (
    ("conv1", "conv2d", {"out": 8}),
    ("relu1", "relu", {}),
    ("pool1", "maxpool", {"window": 2, "stride": 2}),
    ("conv2", "conv2d", {"out": 16}),
    ("relu2", "relu", {}),
    ("pool2", "maxpool", {"window": 2, "stride": 2}),
    ("conv3", "conv2d", {"out": 8}),
    ("relu3", "relu", {}),
)


def make_reference_net(seed=42, in_channels=1):
    """Seeded 3-conv reference network (32 filters) with Glorot-uniform kernels.

    Kernels are drawn in layer order from one splitmix64 stream, row-major
    within each kernel, as ``uniform(-a, a)`` with
    ``a = sqrt(6 / (fan_in + fan_out))``; biases are zero.
    """
    layers, previous = [], INPUT_ID
    for layer_id, kind, params in REFERENCE_LAYERS:
        params = dict(params)
        if kind == "conv2d":
            params.update(kh=3, kw=3, stride=1, pad=1)
        layers.append(LayerSpec(layer_id, kind, params, (previous,)))
        previous = layer_id
    graph = NetworkGraph("refnet", (in_channels, None, None), tuple(layers))

    rng = SplitMix64(seed)
    weights = {}
    for name, shape in expected_parameters(graph).items():
        if name.endswith(".kernel"):
            out_c, in_c, kh, kw = shape
            bound = math.sqrt(6.0 / (in_c * kh * kw + out_c * kh * kw))
            values = rng.uniform(math.prod(shape), -bound, bound)
            weights[name] = values.astype(np.float32).reshape(shape)
        else:
            weights[name] = np.zeros(shape, dtype=np.float32)
    return graph, check_weights(graph, weights)
