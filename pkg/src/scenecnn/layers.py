"""Layer implementations with explicit forward/backward passes.

Every layer follows the same small protocol used by :mod:`scenecnn.autodiff`:

* ``forward(xs, train, key) -> (y, cache)`` where ``xs`` is the list of input
  tensors and ``key`` identifies the random stream for stochastic layers;
* ``backward(cache, gy, need_input_grad) -> (grad_inputs, grad_params)``;
* ``output_shape(in_shapes)`` for per-sample shapes (batch axis omitted);
* ``config()`` returning the JSON-able hyper-parameters.

Images are NCHW.  Convolution is cross-correlation (no kernel flip), computed
through an im2col matrix product.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DEFAULT_DTYPE, ShapeError, make_rng


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=DEFAULT_DTYPE):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Strided view of shape [N, C, oh, ow, kh, kw]."""
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _scatter_windows(dwin: np.ndarray, padded_shape, stride: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: sum [N, C, kh, kw, oh, ow] window grads into the image."""
    kh, kw, oh, ow = dwin.shape[2:]
    dx = np.zeros(padded_shape, dtype=dwin.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dwin[:, :, i, j]
    return dx


def _pad(x: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def _unpad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.ascontiguousarray(x[:, :, pad:-pad, pad:-pad])


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    def config(self) -> dict:
        raise NotImplementedError

    def output_shape(self, in_shapes: Sequence[tuple]) -> tuple:
        raise NotImplementedError

    def forward(self, xs, train=False, key=()):
        raise NotImplementedError

    def backward(self, cache, gy, need_input_grad=True):
        raise NotImplementedError

    def init_params(self, rng: np.random.Generator) -> None:
        pass

    def astype(self, dtype) -> None:
        for name, p in self.params.items():
            self.params[name] = p.astype(dtype)


def _check_single(xs, name):
    if len(xs) != 1:
        raise ShapeError(f"{name} takes exactly one input, got {len(xs)}")
    return xs[0]


class Conv2D(Layer):
    """Cross-correlation with per-filter bias and an optional fused ReLU.

    ``weight`` has shape [num_filters, in_channels, kernel_h, kernel_w].
    """

    kind = "conv"

    def __init__(self, in_channels: int, num_filters: int, kernel_h: int, kernel_w: int | None = None,
                 stride: int = 1, padding: int = 0, activation: str = "relu"):
        super().__init__()
        kernel_w = kernel_h if kernel_w is None else kernel_w
        if activation not in ("relu", "identity"):
            raise ValueError(f"unsupported activation {activation!r}")
        self.in_channels = in_channels
        self.num_filters = num_filters
        self.kernel_h = kernel_h
        self.kernel_w = kernel_w
        self.stride = stride
        self.padding = padding
        self.activation = activation
        self.params = {
            "weight": np.zeros((num_filters, in_channels, kernel_h, kernel_w), dtype=DEFAULT_DTYPE),
            "bias": np.zeros(num_filters, dtype=DEFAULT_DTYPE),
        }

    def config(self):
        return {"in_channels": self.in_channels, "num_filters": self.num_filters,
                "kernel_h": self.kernel_h, "kernel_w": self.kernel_w, "stride": self.stride,
                "padding": self.padding, "activation": self.activation}

    def init_params(self, rng):
        k = self.kernel_h * self.kernel_w
        self.params["weight"] = glorot_uniform(rng, self.params["weight"].shape,
                                               self.in_channels * k, self.num_filters * k)
        self.params["bias"] = np.zeros(self.num_filters, dtype=DEFAULT_DTYPE)

    def output_shape(self, in_shapes):
        c, h, w = in_shapes[0]
        if c != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got {c}")
        oh = _out_size(h, self.kernel_h, self.stride, self.padding)
        ow = _out_size(w, self.kernel_w, self.stride, self.padding)
        if oh < 1 or ow < 1:
            raise ShapeError(f"output size {oh}x{ow} < 1 for {h}x{w} input")
        return (self.num_filters, oh, ow)

    def forward(self, xs, train=False, key=()):
        x = _check_single(xs, "conv")
        if x.ndim != 4:
            raise ShapeError(f"conv expects NCHW input, got shape {x.shape}")
        n = x.shape[0]
        _, oh, ow = self.output_shape([x.shape[1:]])
        xp = _pad(x, self.padding)
        win = _windows(xp, self.kernel_h, self.kernel_w, self.stride)
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, -1)
        wmat = self.params["weight"].reshape(self.num_filters, -1)
        y = cols @ wmat.T
        y += self.params["bias"]
        if self.activation == "relu":
            np.maximum(y, 0, out=y)
        y = np.ascontiguousarray(y.reshape(n, oh, ow, self.num_filters).transpose(0, 3, 1, 2))
        return y, (x.shape, xp.shape, cols, y)

    def backward(self, cache, gy, need_input_grad=True):
        x_shape, xp_shape, cols, y = cache
        if self.activation == "relu":
            gy = gy * (y > 0)
        n, f, oh, ow = gy.shape
        g = gy.transpose(0, 2, 3, 1).reshape(-1, f)
        grads = {
            "weight": (g.T @ cols).reshape(self.params["weight"].shape),
            "bias": gy.sum(axis=(0, 2, 3)),
        }
        if not need_input_grad:
            return [None], grads
        wmat = self.params["weight"].reshape(f, -1)
        dcols = (g @ wmat).reshape(n, oh, ow, self.in_channels, self.kernel_h, self.kernel_w)
        dxp = _scatter_windows(dcols.transpose(0, 3, 4, 5, 1, 2), xp_shape, self.stride)
        return [_unpad(dxp, self.padding)], grads


class Pool2D(Layer):
    """Max or average pooling.

    Max-pool ties go to the first window element in row-major order.  Padding
    uses -inf for max (never selected) and zeros for average (the divisor is
    always the full window area).
    """

    kind = "pool"

    def __init__(self, mode: str = "max", window_h: int = 2, window_w: int | None = None,
                 stride: int = 2, padding: int = 0):
        super().__init__()
        if mode not in ("max", "avg"):
            raise ValueError(f"unknown pooling mode {mode!r}")
        window_w = window_h if window_w is None else window_w
        if padding >= min(window_h, window_w):
            raise ValueError("pool padding must be smaller than the window")
        self.mode = mode
        self.window_h = window_h
        self.window_w = window_w
        self.stride = stride
        self.padding = padding

    def config(self):
        return {"mode": self.mode, "window_h": self.window_h, "window_w": self.window_w,
                "stride": self.stride, "padding": self.padding}

    def output_shape(self, in_shapes):
        c, h, w = in_shapes[0]
        oh = _out_size(h, self.window_h, self.stride, self.padding)
        ow = _out_size(w, self.window_w, self.stride, self.padding)
        if oh < 1 or ow < 1:
            raise ShapeError(f"output size {oh}x{ow} < 1 for {h}x{w} input")
        return (c, oh, ow)

    def forward(self, xs, train=False, key=()):
        x = _check_single(xs, "pool")
        if x.ndim != 4:
            raise ShapeError(f"pool expects NCHW input, got shape {x.shape}")
        self.output_shape([x.shape[1:]])
        fill = -np.inf if self.mode == "max" else 0.0
        xp = _pad(x, self.padding, fill)
        win = _windows(xp, self.window_h, self.window_w, self.stride)
        if self.mode == "avg":
            y = np.ascontiguousarray(win.mean(axis=(4, 5), dtype=x.dtype))
            return y, (xp.shape, y.shape)
        flat = win.reshape(win.shape[:4] + (-1,))
        arg = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return np.ascontiguousarray(y), (xp.shape, arg)

    def argmax_indices(self, x: np.ndarray) -> np.ndarray:
        """Winner position inside each window, flattened row-major (max mode only)."""
        return self.forward([x])[1][1]

    def backward(self, cache, gy, need_input_grad=True):
        if not need_input_grad:
            return [None], {}
        xp_shape, extra = cache
        kh, kw = self.window_h, self.window_w
        n, c, oh, ow = gy.shape
        if self.mode == "avg":
            share = gy / gy.dtype.type(kh * kw)
            dwin = np.broadcast_to(share[:, :, None, None], (n, c, kh, kw, oh, ow))
        else:
            arg = extra
            positions = np.arange(kh * kw).reshape(kh, kw)
            dwin = np.where(arg[:, :, None, None] == positions[None, None, :, :, None, None],
                            gy[:, :, None, None], gy.dtype.type(0))
        dxp = _scatter_windows(dwin, xp_shape, self.stride)
        return [_unpad(dxp, self.padding)], {}


def _channel_window_sum(a: np.ndarray, before: int, after: int) -> np.ndarray:
    """out[:, c] = sum of a[:, c'] for c' in [c - before, c + after], truncated at the edges."""
    c = a.shape[1]
    out = np.zeros_like(a)
    for off in range(-before, after + 1):
        lo, hi = max(0, -off), min(c, c - off)
        if lo < hi:
            out[:, lo:hi] += a[:, lo + off:hi + off]
    return out


class LRN(Layer):
    """Cross-channel local response normalization.

    ``y[c] = x[c] / (k + alpha * sum_{c' in window(c)} x[c']**2) ** beta`` where
    the window covers ``size`` channels centred on ``c`` (truncated at the
    channel boundaries).
    """

    kind = "lrn"

    def __init__(self, size: int = 5, alpha: float = 1e-4, beta: float = 0.75, k: float = 1.0):
        super().__init__()
        self.size = size
        self.alpha = alpha
        self.beta = beta
        self.k = k

    def _span(self):
        before = self.size // 2
        return before, self.size - 1 - before

    def config(self):
        return {"size": self.size, "alpha": self.alpha, "beta": self.beta, "k": self.k}

    def output_shape(self, in_shapes):
        return tuple(in_shapes[0])

    def forward(self, xs, train=False, key=()):
        x = _check_single(xs, "lrn")
        before, after = self._span()
        d = self.k + self.alpha * _channel_window_sum(x * x, before, after)
        scale = d ** -self.beta
        return x * scale, (x, d, scale)

    def backward(self, cache, gy, need_input_grad=True):
        if not need_input_grad:
            return [None], {}
        x, d, scale = cache
        before, after = self._span()
        t = gy * x * scale / d
        # transpose of the window: c' is in window(c) iff c is in [c' - after, c' + before]
        back = _channel_window_sum(t, after, before)
        return [gy * scale - (2 * self.alpha * self.beta) * x * back], {}


class Dropout(Layer):
    """Inverted dropout: identity at eval, zero-and-rescale in train mode."""

    kind = "dropout"

    def __init__(self, p: float = 0.5, seed: int = 0):
        super().__init__()
        if not 0 <= p < 1:
            raise ValueError("dropout probability must be in [0, 1)")
        self.p = p
        self.seed = seed

    def config(self):
        return {"p": self.p, "seed": self.seed}

    def output_shape(self, in_shapes):
        return tuple(in_shapes[0])

    def mask(self, shape, key=(), dtype=DEFAULT_DTYPE):
        keep = make_rng(self.seed, *key).random(shape) >= self.p
        return keep.astype(dtype) * dtype(1.0 / (1.0 - self.p))

    def forward(self, xs, train=False, key=()):
        x = _check_single(xs, "dropout")
        if not train or self.p == 0:
            return x, None
        m = self.mask(x.shape, key, x.dtype.type)
        return x * m, m

    def backward(self, cache, gy, need_input_grad=True):
        if not need_input_grad:
            return [None], {}
        return [gy if cache is None else gy * cache], {}


class Dense(Layer):
    """Fully connected layer ``o_j = act(sum_i w_ji x_i - theta_j)``.

    Inputs with more than two axes are flattened per sample.  Note the
    threshold is subtracted, not added.
    """

    kind = "fc"

    def __init__(self, in_units: int, out_units: int, activation: str = "relu"):
        super().__init__()
        if activation not in ("relu", "identity"):
            raise ValueError(f"unsupported activation {activation!r}")
        self.in_units = in_units
        self.out_units = out_units
        self.activation = activation
        self.params = {
            "weight": np.zeros((out_units, in_units), dtype=DEFAULT_DTYPE),
            "threshold": np.zeros(out_units, dtype=DEFAULT_DTYPE),
        }

    def config(self):
        return {"in_units": self.in_units, "out_units": self.out_units, "activation": self.activation}

    def init_params(self, rng):
        self.params["weight"] = glorot_uniform(rng, (self.out_units, self.in_units),
                                               self.in_units, self.out_units)
        self.params["threshold"] = np.zeros(self.out_units, dtype=DEFAULT_DTYPE)

    def output_shape(self, in_shapes):
        units = math.prod(in_shapes[0])
        if units != self.in_units:
            raise ShapeError(f"expected {self.in_units} input units, got {units}")
        return (self.out_units,)

    def forward(self, xs, train=False, key=()):
        x = _check_single(xs, "fc")
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.in_units:
            raise ShapeError(f"expected {self.in_units} input units, got {flat.shape[1]}")
        z = flat @ self.params["weight"].T
        z -= self.params["threshold"]
        if self.activation == "relu":
            np.maximum(z, 0, out=z)
        return z, (x.shape, flat, z)

    def backward(self, cache, gy, need_input_grad=True):
        x_shape, flat, y = cache
        if self.activation == "relu":
            gy = gy * (y > 0)
        grads = {"weight": gy.T @ flat, "threshold": -gy.sum(axis=0)}
        if not need_input_grad:
            return [None], grads
        return [(gy @ self.params["weight"]).reshape(x_shape)], grads


class Concat(Layer):
    """Channel-axis concatenation in declared input order."""

    kind = "concat"

    def config(self):
        return {}

    def output_shape(self, in_shapes):
        spatial = {tuple(s[1:]) for s in in_shapes}
        if len(spatial) != 1:
            raise ShapeError(f"concat inputs disagree on spatial size: {sorted(spatial)}")
        return (sum(s[0] for s in in_shapes),) + tuple(in_shapes[0][1:])

    def forward(self, xs, train=False, key=()):
        if len({(x.shape[0],) + x.shape[2:] for x in xs}) != 1:
            raise ShapeError(f"concat inputs disagree on batch/spatial size: {[x.shape for x in xs]}")
        return np.concatenate(xs, axis=1), [x.shape[1] for x in xs]

    def backward(self, cache, gy, need_input_grad=True):
        if not need_input_grad:
            return [None] * len(cache), {}
        bounds = np.cumsum(cache)[:-1]
        return [np.ascontiguousarray(g) for g in np.split(gy, bounds, axis=1)], {}


LAYER_TYPES = {cls.kind: cls for cls in (Conv2D, Pool2D, LRN, Dropout, Dense, Concat)}


def layer_from_config(kind: str, cfg: dict) -> Layer:
    if kind not in LAYER_TYPES:
        raise ValueError(f"unknown layer kind {kind!r}")
    return LAYER_TYPES[kind](**cfg)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels, denom: int | None = None):
    """Softmax probabilities, mean cross-entropy and its gradient w.r.t. the logits.

    ``denom`` overrides the batch size used for averaging, which lets a
    minibatch be processed in chunks that sum to the full-batch gradient.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, classes = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"label out of range [0, {classes})")
    denom = n if denom is None else denom
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    probs = np.exp(log_p)
    rows = np.arange(n)
    loss = float(-log_p[rows, labels].sum() / denom)
    grad = probs.copy()
    grad[rows, labels] -= 1
    grad /= logits.dtype.type(denom)
    return probs, loss, grad
