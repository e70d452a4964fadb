"""The compact CNN: construction, inference, gradients and persistence."""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .layers import Conv2D, Dense, Dropout, Flatten, Layer, MaxPool2D, ReLU, ShapeError, Softmax, layer_from_spec

MAGIC = b"EVPM"
FORMAT_VERSION = 1


class CompactCnn:
    """A sequential layer stack ending in ``dense(C) -> softmax``.

    Weights are created at construction from ``rng_seed``; ``dtype`` is float64
    for gradient checks and float32 for evolution runs.
    """

    def __init__(
        self,
        layers: Sequence[Layer],
        input_shape: tuple[int, int, int],
        num_classes: int,
        rng_seed: int = 0,
        dtype=np.float32,
    ):
        self.layers = list(layers)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.num_classes = int(num_classes)
        self.rng_seed = int(rng_seed)
        self.dtype = np.dtype(dtype)
        if len(self.layers) < 2 or not isinstance(self.layers[-1], Softmax) or not isinstance(self.layers[-2], Dense):
            raise ValueError("model must end with dense(C) followed by softmax")
        if self.layers[-2].units != self.num_classes:
            raise ValueError(f"last dense layer has {self.layers[-2].units} units, expected {self.num_classes}")
        rng = np.random.default_rng(self.rng_seed)
        shape = self.input_shape
        last_param = max(i for i, l in enumerate(self.layers) if isinstance(l, (Conv2D, Dense)))
        for i, layer in enumerate(self.layers):
            out = layer.output_shape(shape)
            layer.build(shape, rng, self.dtype, last=(i == last_param))
            shape = out

    # --- introspection ------------------------------------------------------

    def parameter_count(self) -> int:
        return sum(layer.n_params() for layer in self.layers)

    def param_items(self):
        """Yield (layer_index, name, array) for every trainable tensor, in a fixed order."""
        for i, layer in enumerate(self.layers):
            for name in sorted(layer.params):
                yield i, name, layer.params[name]

    def get_params(self) -> dict[str, np.ndarray]:
        return {f"{i}.{n}": a for i, n, a in self.param_items()}

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        for key, value in params.items():
            i, n = key.split(".")
            self.layers[int(i)].params[n] = value

    def get_grads(self) -> dict[str, np.ndarray]:
        return {f"{i}.{n}": self.layers[i].grads[n] for i, n, _ in self.param_items()}

    def specs(self) -> list[dict]:
        return [layer.spec() for layer in self.layers]

    # --- passes -------------------------------------------------------------

    def _check_input(self, x):
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"expected batch of shape (N, {', '.join(map(str, self.input_shape))}), got {x.shape}")

    def logits(self, x: np.ndarray, training: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
        x = np.asarray(x)
        self._check_input(x)
        out = x.astype(self.dtype, copy=False)
        for layer in self.layers[:-1]:
            out = layer.forward(out, training, rng)
        return out

    def forward(self, x: np.ndarray, training: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
        """Class probabilities, shape (N, C)."""
        if training and rng is None:
            raise ValueError("training forward pass needs an rng for dropout")
        return self.layers[-1].forward(self.logits(x, training, rng))

    def loss_and_grads(
        self, x: np.ndarray, y: np.ndarray, training: bool = False, rng: np.random.Generator | None = None
    ) -> float:
        """Mean softmax cross-entropy; fills ``layer.grads`` for every trainable layer."""
        z = self.logits(x, training, rng)
        z = z - z.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
        logp = z - logsum
        n = x.shape[0]
        loss = float(-logp[np.arange(n), y].mean())
        d = np.exp(logp)
        d[np.arange(n), y] -= 1.0
        d /= n
        for layer in reversed(self.layers[:-1]):
            d = layer.backward(d)
        return loss

    def predict_proba(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        return np.concatenate(
            [self.forward(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
        ) if len(x) else np.zeros((0, self.num_classes), self.dtype)

    def predict(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        return self.predict_proba(x, batch_size).argmax(axis=1)

    def accuracy(self, x: np.ndarray, y: np.ndarray, batch_size: int = 64) -> float:
        if len(x) == 0:
            raise ValueError("cannot score an empty set")
        return float((self.predict(x, batch_size) == np.asarray(y)).mean())

    # --- persistence --------------------------------------------------------

    def to_bytes(self) -> bytes:
        tensors = [{"layer": i, "name": n, "shape": list(a.shape)} for i, n, a in self.param_items()]
        header = {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "rng_seed": self.rng_seed,
            "layers": self.specs(),
            "tensors": tensors,
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(blob)), blob]
        parts += [np.ascontiguousarray(a, dtype="<f4").tobytes() for _, _, a in self.param_items()]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw: bytes, dtype=np.float32) -> "CompactCnn":
        if raw[:4] != MAGIC:
            raise ValueError("not an evopatch model file")
        version, hlen = struct.unpack_from("<HI", raw, 4)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {version}")
        pos = 10
        header = json.loads(raw[pos : pos + hlen])
        pos += hlen
        model = cls(
            [layer_from_spec(s) for s in header["layers"]],
            tuple(header["input_shape"]),
            header["num_classes"],
            header["rng_seed"],
            dtype,
        )
        for t in header["tensors"]:
            count = int(np.prod(t["shape"], dtype=np.int64))
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(t["shape"])
            pos += 4 * count
            model.layers[t["layer"]].params[t["name"]] = arr.astype(model.dtype)
        if pos != len(raw):
            raise ValueError("trailing bytes in model file")
        return model

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path, dtype=np.float32) -> "CompactCnn":
        return cls.from_bytes(Path(path).read_bytes(), dtype)


def default_layers(
    num_classes: int,
    filters: Sequence[int] = (16, 32, 64),
    kernel: int = 3,
    pool: int = 2,
    dense_units: int = 128,
    conv_dropout: float = 0.25,
    dense_dropout: float = 0.5,
) -> list[Layer]:
    layers: list[Layer] = []
    for f in filters:
        layers += [Conv2D(f, (kernel, kernel)), ReLU(), MaxPool2D(pool), Dropout(conv_dropout)]
    layers += [Flatten(), Dense(dense_units), ReLU(), Dropout(dense_dropout), Dense(num_classes), Softmax()]
    return layers


def build_default(
    input_dims: tuple[int, int, int],
    num_classes: int,
    rng_seed: int = 0,
    dtype=np.float32,
    **arch,
) -> CompactCnn:
    """Three conv/relu/pool/dropout stages, dense(128), dense(C) + softmax.

    Raises :class:`ShapeError` when the input cannot survive the three stages.
    """
    return CompactCnn(default_layers(num_classes, **arch), input_dims, num_classes, rng_seed, dtype)


def build_proxy(input_dims: tuple[int, int, int], num_classes: int, rng_seed: int = 0, dtype=np.float32) -> CompactCnn:
    """Multinomial logistic regression on the flattened input (fast test mode)."""
    return CompactCnn([Flatten(), Dense(num_classes), Softmax()], input_dims, num_classes, rng_seed, dtype)


def default_parameter_count(
    input_dims: tuple[int, int, int],
    num_classes: int,
    filters: Sequence[int] = (16, 32, 64),
    kernel: int = 3,
    pool: int = 2,
    dense_units: int = 128,
    **_,
) -> int:
    """Closed-form parameter count of :func:`build_default` without allocating weights."""
    h, w, c = input_dims
    total = 0
    for f in filters:
        if h < kernel or w < kernel:
            raise ShapeError(f"conv kernel {kernel}x{kernel} larger than feature map {h}x{w}")
        total += (kernel * kernel * c + 1) * f
        h, w, c = h - kernel + 1, w - kernel + 1, f
        if h < pool or w < pool:
            raise ShapeError(f"pool window {pool} larger than feature map {h}x{w}")
        h, w = h // pool, w // pool
    flat = h * w * c
    total += (flat + 1) * dense_units + (dense_units + 1) * num_classes
    return total


def parameter_count(model: CompactCnn) -> int:
    return model.parameter_count()
