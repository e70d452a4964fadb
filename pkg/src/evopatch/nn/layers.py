"""Layers with explicit forward/backward passes (NHWC)."""

from __future__ import annotations

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Input shape incompatible with the layer stack."""


class Layer:
    kind = ""
    params: dict[str, np.ndarray]

    def __init__(self):
        self.params = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def build(self, in_shape, rng, dtype, last: bool = False) -> None:
        pass

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def spec(self) -> dict:
        return {"kind": self.kind}

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())


def _he_uniform(rng, fan_in, shape, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _glorot_uniform(rng, fan_in, fan_out, shape, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, filters: int, kernel: tuple[int, int] = (3, 3)):
        super().__init__()
        self.filters = int(filters)
        self.kernel = (int(kernel[0]), int(kernel[1]))

    def output_shape(self, in_shape):
        h, w, _ = in_shape
        kh, kw = self.kernel
        if kh > h or kw > w:
            raise ShapeError(f"conv kernel {kh}x{kw} larger than feature map {h}x{w}")
        return (h - kh + 1, w - kw + 1, self.filters)

    def build(self, in_shape, rng, dtype, last=False):
        kh, kw = self.kernel
        cin = in_shape[2]
        fan_in = kh * kw * cin
        self.params = {
            "W": _he_uniform(rng, fan_in, (kh, kw, cin, self.filters), dtype),
            "b": np.zeros(self.filters, dtype=dtype),
        }

    def forward(self, x, training=False, rng=None):
        kh, kw = self.kernel
        cols = kernels.im2col(x, kh, kw)
        w = self.params["W"].reshape(-1, self.filters)
        out = cols @ w + self.params["b"]
        self._cache = (x.shape, cols)
        return out

    def backward(self, dout):
        (n, h, w, cin), cols = self._cache
        kh, kw = self.kernel
        k = cols.shape[-1]
        d2 = dout.reshape(-1, self.filters)
        self.grads["W"] = (cols.reshape(-1, k).T @ d2).reshape(self.params["W"].shape)
        self.grads["b"] = d2.sum(axis=0)
        dcols = dout @ self.params["W"].reshape(-1, self.filters).T
        return kernels.col2im(dcols, h, w, kh, kw)

    def spec(self):
        return {"kind": self.kind, "filters": self.filters, "kernel": list(self.kernel)}


class MaxPool2D(Layer):
    kind = "maxpool2d"

    def __init__(self, window: int = 2):
        super().__init__()
        self.window = int(window)

    def output_shape(self, in_shape):
        h, w, c = in_shape
        if h < self.window or w < self.window:
            raise ShapeError(f"pool window {self.window} larger than feature map {h}x{w}")
        return (h // self.window, w // self.window, c)

    def forward(self, x, training=False, rng=None):
        out, idx = kernels.maxpool_forward(x, self.window)
        self._cache = (x.shape, idx)
        return out

    def backward(self, dout):
        (n, h, w, c), idx = self._cache
        return kernels.maxpool_backward(dout, idx, h, w, self.window)

    def spec(self):
        return {"kind": self.kind, "window": self.window}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False, rng=None):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, dout):
        return dout * self._cache


class Dropout(Layer):
    """Inverted dropout; identity at inference."""

    kind = "dropout"

    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)

    def forward(self, x, training=False, rng=None):
        if not training or self.rate == 0.0:
            self._cache = None
            return x
        keep = 1.0 - self.rate
        mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
        self._cache = mask
        return x * mask

    def backward(self, dout):
        return dout if self._cache is None else dout * self._cache

    def spec(self):
        return {"kind": self.kind, "rate": self.rate}


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, training=False, rng=None):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._cache)


class Dense(Layer):
    kind = "dense"

    def __init__(self, units: int):
        super().__init__()
        self.units = int(units)

    def output_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"dense layer needs flat input, got {in_shape}")
        return (self.units,)

    def build(self, in_shape, rng, dtype, last=False):
        fan_in = in_shape[0]
        if last:
            w = _glorot_uniform(rng, fan_in, self.units, (fan_in, self.units), dtype)
        else:
            w = _he_uniform(rng, fan_in, (fan_in, self.units), dtype)
        self.params = {"W": w, "b": np.zeros(self.units, dtype=dtype)}

    def forward(self, x, training=False, rng=None):
        self._cache = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dout):
        x = self._cache
        self.grads["W"] = x.T @ dout
        self.grads["b"] = dout.sum(axis=0)
        return dout @ self.params["W"].T

    def spec(self):
        return {"kind": self.kind, "units": self.units}


class Softmax(Layer):
    """Row-wise softmax. Training fuses it with cross-entropy, so backward is the full Jacobian product."""

    kind = "softmax"

    def forward(self, x, training=False, rng=None):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        self._cache = p
        return p

    def backward(self, dout):
        p = self._cache
        return p * (dout - (dout * p).sum(axis=1, keepdims=True))


LAYER_TYPES = {cls.kind: cls for cls in (Conv2D, MaxPool2D, ReLU, Dropout, Flatten, Dense, Softmax)}


def layer_from_spec(spec: dict) -> Layer:
    spec = dict(spec)
    kind = spec.pop("kind")
    try:
        cls = LAYER_TYPES[kind]
    except KeyError:
        raise ValueError(f"unknown layer kind {kind!r}") from None
    if kind == "conv2d":
        return Conv2D(spec["filters"], tuple(spec.get("kernel", (3, 3))))
    return cls(**spec)
