"""Adam, the minibatch training loop, and finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import CompactCnn


class TrainingDiverged(RuntimeError):
    """Loss became NaN or infinite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, t=1):
    """One bias-corrected Adam update. Pure: returns new params and a new state."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    new_params, new_m, new_v = {}, {}, {}
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for k, p in params.items():
        g = grads[k]
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1.0 - beta1) * g if m is None else beta1 * m + (1.0 - beta1) * g
        v = (1.0 - beta2) * (g * g) if v is None else beta2 * v + (1.0 - beta2) * (g * g)
        m = m.astype(p.dtype, copy=False)
        v = v.astype(p.dtype, copy=False)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_params[k] = (p - update).astype(p.dtype, copy=False)
        new_m[k], new_v[k] = m, v
    return new_params, AdamState(new_m, new_v)


@dataclass
class TrainResult:
    model: CompactCnn
    val_accuracy: float
    losses: list[float]


def train(
    model: CompactCnn,
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_val: np.ndarray,
    y_val: np.ndarray,
    cfg: TrainConfig = TrainConfig(),
    seed: int = 0,
) -> TrainResult:
    """Minibatch Adam on softmax cross-entropy; returns final-epoch validation accuracy.

    Shuffling and dropout masks come from ``seed``; weight init comes from the
    model's own seed, so (model seed, seed, data, cfg) fixes the result bitwise.
    """
    if len(x_train) == 0 or len(x_val) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if len(x_train) != len(y_train) or len(x_val) != len(y_val):
        raise ValueError("inputs and labels differ in length")
    rng = np.random.default_rng(seed)
    y_train = np.asarray(y_train, dtype=np.int64)
    x_train = np.asarray(x_train, dtype=model.dtype)
    state = AdamState()
    t = 0
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(x_train))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss = model.loss_and_grads(x_train[idx], y_train[idx], training=True, rng=rng)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {t + 1}")
            t += 1
            params, state = adam_step(
                model.get_params(), model.get_grads(), state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, t
            )
            model.set_params(params)
            epoch_loss += loss * len(idx)
        losses.append(epoch_loss / len(order))
    return TrainResult(model, model.accuracy(x_val, y_val), losses)


def grad_check(model: CompactCnn, x: np.ndarray, y: np.ndarray, step: float = 1e-5, floor: float = 1e-7) -> float:
    """Largest relative error between backprop and central differences over every parameter.

    Relative error is ``|a - n| / max(|a| + |n|, floor)``; the floor keeps
    exactly-zero gradients (dead ReLUs) from dividing by zero.
    """
    if model.dtype != np.float64:
        raise ValueError("gradient checks need a float64 model")
    if any(getattr(layer, "rate", 0.0) for layer in model.layers):
        raise ValueError("disable dropout before checking gradients")
    model.loss_and_grads(x, y)
    analytic = {k: g.copy() for k, g in model.get_grads().items()}
    worst = 0.0
    for key, p in model.get_params().items():
        flat = p.reshape(-1)
        g = analytic[key].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp = model.loss_and_grads(x, y)
            flat[i] = orig - step
            lm = model.loss_and_grads(x, y)
            flat[i] = orig
            num = (lp - lm) / (2 * step)
            err = abs(g[i] - num) / max(abs(g[i]) + abs(num), floor)
            worst = max(worst, err)
    return worst
