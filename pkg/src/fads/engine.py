"""Forward and backward operators for running a fixed CNN.

Tensors are C-contiguous float32 numpy arrays laid out ``[C, H, W]`` (kernels
``[O, C, kH, kW]``). Inner products accumulate in float64 and are stored back
as float32.
"""
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .netio import INPUT_ID

TAPS = ("conv", "relu")
GRAD_MODES = ("vanilla", "guided")


class DimensionError(ValueError):
    """Incompatible tensor shapes."""


class NonFiniteError(ValueError):
    pass


def as_tensor(x, name="tensor"):
    arr = np.ascontiguousarray(x, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return arr


def _check_finite(arr, name):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} produced NaN or Inf")
    return arr


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad)))


def conv2d(x, kernel, bias, stride=1, padding=0):
    x = as_tensor(x, "conv2d input")
    kernel = as_tensor(kernel, "conv2d kernel")
    bias = as_tensor(bias, "conv2d bias")
    if x.ndim != 3 or kernel.ndim != 4 or kernel.shape[1] != x.shape[0] or bias.shape != (kernel.shape[0],):
        raise DimensionError(
            f"conv2d: input {list(x.shape)} incompatible with kernel {list(kernel.shape)} "
            f"and bias {list(bias.shape)}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: invalid stride {stride} / padding {padding}")
    _, kh, kw = kernel.shape[1:]
    h_out = (x.shape[1] + 2 * padding - kh) // stride + 1
    w_out = (x.shape[2] + 2 * padding - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise DimensionError(f"conv2d: input {list(x.shape)} too small for kernel {list(kernel.shape)}")
    windows = sliding_window_view(_pad(x, padding), (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride][:, :h_out, :w_out].astype(np.float64)
    out = np.tensordot(kernel.astype(np.float64), windows, axes=([1, 2, 3], [0, 3, 4]))
    out += bias.astype(np.float64)[:, None, None]
    return _check_finite(out.astype(np.float32), "conv2d")


def conv2d_backward(grad, x_shape, kernel, stride=1, padding=0):
    """Gradient w.r.t. the conv input: transposed convolution of ``grad`` with ``kernel``."""
    c, h, w = x_shape
    _, _, kh, kw = kernel.shape
    _, h_out, w_out = grad.shape
    cols = np.tensordot(kernel.astype(np.float64), grad.astype(np.float64), axes=([0], [0]))
    dxp = np.zeros((c, h + 2 * padding, w + 2 * padding))
    for u in range(kh):
        for v in range(kw):
            dxp[:, u:u + stride * h_out:stride, v:v + stride * w_out:stride] += cols[:, u, v]
    return dxp[:, padding:padding + h, padding:padding + w]


def relu(x):
    x = as_tensor(x, "relu input")
    return np.maximum(x, np.float32(0))


def relu_backward(grad, x, mode="vanilla"):
    mask = x > 0
    if mode == "guided":
        mask &= grad > 0
    return np.where(mask, grad, 0.0)


def maxpool(x, window, stride=None):
    """Windowed maximum; returns ``(out, (rows, cols))`` absolute winner positions.

    Ties resolve to the first maximal element in row-major window order.
    """
    x = as_tensor(x, "maxpool input")
    stride = window if stride is None else stride
    if x.ndim != 3:
        raise DimensionError(f"maxpool: expected [C,H,W], got {list(x.shape)}")
    if x.shape[1] < window or x.shape[2] < window:
        raise DimensionError(f"maxpool: window {window} larger than spatial extent {list(x.shape[1:])}")
    c = x.shape[0]
    h_out = (x.shape[1] - window) // stride + 1
    w_out = (x.shape[2] - window) // stride + 1
    windows = sliding_window_view(x, (window, window), axis=(1, 2))[:, ::stride, ::stride]
    windows = windows[:, :h_out, :w_out].reshape(c, h_out, w_out, window * window)
    idx = np.argmax(windows, axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    rows = np.arange(h_out)[:, None] * stride + idx // window
    cols = np.arange(w_out)[None, :] * stride + idx % window
    return np.ascontiguousarray(out), (rows, cols)


def maxpool_backward(grad, x_shape, argmax):
    rows, cols = argmax
    dx = np.zeros(x_shape)
    channels = np.broadcast_to(np.arange(x_shape[0])[:, None, None], rows.shape)
    np.add.at(dx, (channels, rows, cols), grad)
    return dx


def batchnorm_inference(x, mean, var, gamma, beta, eps=1e-5):
    x = as_tensor(x, "batchnorm input")
    params = [np.asarray(p, dtype=np.float64) for p in (mean, var, gamma, beta)]
    if any(p.shape != (x.shape[0],) for p in params):
        raise DimensionError(f"batchnorm: parameter lengths must equal channels {x.shape[0]}")
    mean, var, gamma, beta = params
    if np.any(var < 0):
        raise ValueError("batchnorm: negative variance")
    scale = gamma / np.sqrt(var + eps)
    shape = (-1,) + (1,) * (x.ndim - 1)
    out = (x.astype(np.float64) - mean.reshape(shape)) * scale.reshape(shape) + beta.reshape(shape)
    return _check_finite(out.astype(np.float32), "batchnorm")


def dense(x, weight, bias):
    x = as_tensor(x, "dense input")
    if x.ndim != 1 or weight.shape[1] != x.shape[0]:
        raise DimensionError(f"dense: input {list(x.shape)} incompatible with weight {list(weight.shape)}")
    out = weight.astype(np.float64) @ x.astype(np.float64) + bias.astype(np.float64)
    return _check_finite(out.astype(np.float32), "dense")


@dataclass(frozen=True)
class ActivationRecord:
    """Everything one forward pass produced.

    ``filter_maps[i]`` is the 2-D map of global filter ``i`` (conv layers in
    graph order, channels in order). ``argmax_cache`` holds max-pool winners.
    """

    outputs: dict
    filter_maps: list
    argmax_cache: dict
    final_output: np.ndarray
    tap: str
    graph_name: str

    @property
    def input(self):
        return self.outputs[INPUT_ID]


def forward(graph, weights, image, tap="conv"):
    """Run ``graph`` on ``image`` and record per-filter activation maps.

    ``tap="conv"`` records conv outputs before any activation; ``tap="relu"``
    records ``relu(conv output)``.
    """
    if tap not in TAPS:
        raise ValueError(f"tap must be one of {TAPS}, got {tap!r}")
    image = as_tensor(image, "image").copy()
    spec = graph.input_spec
    if image.ndim != 3 or image.shape[0] != spec[0] or any(
            s is not None and s != e for s, e in zip(spec[1:], image.shape[1:])):
        raise DimensionError(f"image shape {list(image.shape)} does not match graph input {list(spec)}")

    outputs = {INPUT_ID: image}
    argmax_cache = {}
    filter_maps = []
    for layer in graph.layers:
        x = outputs[layer.inputs[0]]
        p = layer.params
        try:
            if layer.kind == "conv2d":
                y = conv2d(x, weights[f"{layer.id}.kernel"], weights[f"{layer.id}.bias"], p["stride"], p["pad"])
                maps = y if tap == "conv" else relu(y)
                filter_maps.extend(maps[c] for c in range(maps.shape[0]))
            elif layer.kind == "relu":
                y = relu(x)
            elif layer.kind == "maxpool":
                y, argmax_cache[layer.id] = maxpool(x, p["window"], p["stride"])
            elif layer.kind == "batchnorm":
                y = batchnorm_inference(x, *(weights[f"{layer.id}.{n}"] for n in ("mean", "var", "gamma", "beta")),
                                        eps=p["eps"])
            elif layer.kind == "add":
                other = outputs[layer.inputs[1]]
                if other.shape != x.shape:
                    raise DimensionError(f"add: {list(x.shape)} vs {list(other.shape)}")
                y = _check_finite((x.astype(np.float64) + other).astype(np.float32), "add")
            elif layer.kind == "gap":
                y = x.astype(np.float64).mean(axis=(1, 2)).astype(np.float32)
            elif layer.kind == "flatten":
                y = x.reshape(-1)
            elif layer.kind == "dense":
                y = dense(x, weights[f"{layer.id}.weight"], weights[f"{layer.id}.bias"])
        except DimensionError as exc:
            raise DimensionError(f"layer {layer.id!r}: {exc}") from None
        except KeyError as exc:
            raise DimensionError(f"layer {layer.id!r}: missing weight {exc.args[0]!r}") from None
        outputs[layer.id] = y
    for arr in outputs.values():
        arr.setflags(write=False)
    return ActivationRecord(outputs, filter_maps, argmax_cache, outputs[graph.layers[-1].id], tap, graph.name)


def backward(record, graph, weights, grad_seed, mode="vanilla", output_grad=None):
    """Gradient of ``sum_i <grad_seed[i], filter_maps[i]>`` w.r.t. the input image.

    ``output_grad``, if given, additionally seeds the final layer output.

    ``grad_seed`` maps global filter index -> 2-D gradient (a dict, or a
    sequence with ``None`` for unselected filters). In ``guided`` mode ReLU
    passes gradient only where both the forward input and the incoming
    gradient are positive.
    """
    if mode not in GRAD_MODES:
        raise ValueError(f"mode must be one of {GRAD_MODES}, got {mode!r}")
    if record.graph_name != graph.name or len(record.filter_maps) != graph.filter_count:
        raise DimensionError("activation record was not produced by this graph")
    if not isinstance(grad_seed, dict):
        grad_seed = {i: g for i, g in enumerate(grad_seed) if g is not None}

    outputs = record.outputs
    grads = {}

    def accumulate(layer_id, g):
        if layer_id in grads:
            grads[layer_id] = grads[layer_id] + g
        else:
            grads[layer_id] = g

    for layer_id, (start, stop) in graph.filter_ranges().items():
        selected = [i for i in range(start, stop) if i in grad_seed]
        if not selected:
            continue
        y = outputs[layer_id]
        seed = np.zeros(y.shape)
        for i in selected:
            g = np.asarray(grad_seed[i], dtype=np.float64)
            if g.shape != y.shape[1:]:
                raise DimensionError(f"grad_seed[{i}] has shape {list(g.shape)}, filter map is {list(y.shape[1:])}")
            seed[i - start] = g
        if record.tap == "relu":
            seed = relu_backward(seed, y, mode)
        accumulate(layer_id, seed)

    if output_grad is not None:
        output_grad = np.asarray(output_grad, dtype=np.float64)
        if output_grad.shape != record.final_output.shape:
            raise DimensionError(
                f"output_grad has shape {list(output_grad.shape)}, output is {list(record.final_output.shape)}")
        accumulate(graph.layers[-1].id, output_grad)

    for layer in reversed(graph.layers):
        g = grads.pop(layer.id, None)
        if g is None:
            continue
        x = outputs[layer.inputs[0]]
        p = layer.params
        if layer.kind == "conv2d":
            dx = conv2d_backward(g, x.shape, weights[f"{layer.id}.kernel"], p["stride"], p["pad"])
        elif layer.kind == "relu":
            dx = relu_backward(g, x, mode)
        elif layer.kind == "maxpool":
            dx = maxpool_backward(g, x.shape, record.argmax_cache[layer.id])
        elif layer.kind == "batchnorm":
            var = weights[f"{layer.id}.var"].astype(np.float64)
            scale = weights[f"{layer.id}.gamma"].astype(np.float64) / np.sqrt(var + p["eps"])
            dx = g * scale.reshape((-1,) + (1,) * (g.ndim - 1))
        elif layer.kind == "add":
            accumulate(layer.inputs[1], g)
            dx = g
        elif layer.kind == "gap":
            dx = np.broadcast_to((g / (x.shape[1] * x.shape[2]))[:, None, None], x.shape)
        elif layer.kind == "flatten":
            dx = g.reshape(x.shape)
        elif layer.kind == "dense":
            dx = weights[f"{layer.id}.weight"].astype(np.float64).T @ g
        accumulate(layer.inputs[0], dx)

    grad = grads.get(INPUT_ID)
    if grad is None:
        return np.zeros(record.input.shape, dtype=np.float32)
    return _check_finite(np.asarray(grad, dtype=np.float32), "backward")


def abs_backward(u):
    """Subgradient of ``|u|``: ``sign(u)`` with 0 at 0."""
    return np.sign(u)

