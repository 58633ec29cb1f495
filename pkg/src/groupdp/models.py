"""Small classifiers with analytic per-example cross-entropy gradients."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

ARCHITECTURES = ("softmax", "mlp")


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelParams:
    """Flat parameter vector plus the architecture needed to interpret it.

    ``softmax``: ``[W (c x d), b (c)]``.
    ``mlp``: ``[W1 (h x d), b1 (h), W2 (c x h), b2 (c)]`` with a ReLU hidden layer.
    """

    arch: str
    d: int
    c: int
    theta: np.ndarray
    h: int = 0

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ShapeError(f"unknown architecture {self.arch!r}")
        theta = np.asarray(self.theta, dtype=float)
        if theta.shape != (n_params(self.arch, self.d, self.c, self.h),):
            raise ShapeError(
                f"expected {n_params(self.arch, self.d, self.c, self.h)} parameters, got shape {theta.shape}"
            )
        if not np.all(np.isfinite(theta)):
            raise ShapeError("parameters must be finite")
        object.__setattr__(self, "theta", theta)

    def with_theta(self, theta: np.ndarray) -> "ModelParams":
        return replace(self, theta=theta)

    @property
    def size(self) -> int:
        return self.theta.size


@dataclass(frozen=True)
class Example:
    features: np.ndarray
    label: int
    group: int = 0


def n_params(arch: str, d: int, c: int, h: int = 0) -> int:
    if arch == "softmax":
        return c * d + c
    if arch == "mlp":
        if h < 1:
            raise ShapeError("mlp needs a hidden width >= 1")
        return h * d + h + c * h + c
    raise ShapeError(f"unknown architecture {arch!r}")


def init_params(
    arch: str, d: int, c: int, rng: np.random.Generator, h: int = 32
) -> ModelParams:
    """Uniform init in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` per layer."""
    if arch == "softmax":
        bound = 1.0 / np.sqrt(d)
        theta = rng.uniform(-bound, bound, size=n_params(arch, d, c))
        return ModelParams(arch, d, c, theta)
    b1, b2 = 1.0 / np.sqrt(d), 1.0 / np.sqrt(h)
    parts = [
        rng.uniform(-b1, b1, size=h * d + h),
        rng.uniform(-b2, b2, size=c * h + c),
    ]
    return ModelParams(arch, d, c, np.concatenate(parts), h)


def zeros(arch: str, d: int, c: int, h: int = 32) -> ModelParams:
    h = h if arch == "mlp" else 0
    return ModelParams(arch, d, c, np.zeros(n_params(arch, d, c, h)), h)


def _unpack(p: ModelParams):
    t, d, c, h = p.theta, p.d, p.c, p.h
    if p.arch == "softmax":
        return t[: c * d].reshape(c, d), t[c * d :]
    i = 0
    W1 = t[i : i + h * d].reshape(h, d); i += h * d
    b1 = t[i : i + h]; i += h
    W2 = t[i : i + c * h].reshape(c, h); i += c * h
    return W1, b1, W2, t[i : i + c]


def _check_batch(p: ModelParams, X, y=None):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != p.d:
        raise ShapeError(f"expected features of width {p.d}, got shape {X.shape}")
    if y is None:
        return X, None
    y = np.atleast_1d(np.asarray(y))
    if y.shape != (X.shape[0],):
        raise ShapeError("one label per row required")
    if np.any(y < 0) or np.any(y >= p.c):
        raise ShapeError(f"labels must lie in [0, {p.c})")
    return X, y.astype(np.int64)


def logits(p: ModelParams, X) -> np.ndarray:
    X, _ = _check_batch(p, X)
    if p.arch == "softmax":
        W, b = _unpack(p)
        return X @ W.T + b
    W1, b1, W2, b2 = _unpack(p)
    return np.maximum(X @ W1.T + b1, 0.0) @ W2.T + b2


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def per_example_losses(p: ModelParams, X, y) -> np.ndarray:
    X, y = _check_batch(p, X, y)
    logp = _log_softmax(logits(p, X))
    return -logp[np.arange(len(y)), y]


def per_example_grads(p: ModelParams, X, y) -> np.ndarray:
    """Row ``i`` is the gradient of example ``i``'s loss w.r.t. the flat parameters."""
    X, y = _check_batch(p, X, y)
    B = X.shape[0]
    if p.arch == "softmax":
        W, b = _unpack(p)
        z = X @ W.T + b
        delta = np.exp(_log_softmax(z))
        delta[np.arange(B), y] -= 1.0
        gW = delta[:, :, None] * X[:, None, :]
        return np.concatenate([gW.reshape(B, -1), delta], axis=1)
    W1, b1, W2, b2 = _unpack(p)
    pre = X @ W1.T + b1
    hid = np.maximum(pre, 0.0)
    delta2 = np.exp(_log_softmax(hid @ W2.T + b2))
    delta2[np.arange(B), y] -= 1.0
    delta1 = (delta2 @ W2) * (pre > 0)
    gW1 = delta1[:, :, None] * X[:, None, :]
    gW2 = delta2[:, :, None] * hid[:, None, :]
    return np.concatenate([gW1.reshape(B, -1), delta1, gW2.reshape(B, -1), delta2], axis=1)


def loss(p: ModelParams, example: Example) -> float:
    return float(per_example_losses(p, example.features, [example.label])[0])


def per_example_grad(p: ModelParams, example: Example) -> np.ndarray:
    return per_example_grads(p, example.features, [example.label])[0]


def predict(p: ModelParams, X) -> np.ndarray:
    """Argmax class; ties resolve to the lowest index."""
    return np.argmax(logits(p, X), axis=1)


def finite_diff_grad(
    p: ModelParams,
    example: Example,
    h: float = 1e-5,
    loss_fn: Callable[[ModelParams, Example], float] = loss,
) -> np.ndarray:
    """Central-difference gradient, one coordinate at a time."""
    if not h > 0:
        raise ValueError("step size must be positive")
    grad = np.empty(p.size)
    for i in range(p.size):
        up = p.theta.copy(); up[i] += h
        dn = p.theta.copy(); dn[i] -= h
        grad[i] = (loss_fn(p.with_theta(up), example) - loss_fn(p.with_theta(dn), example)) / (2 * h)
    return grad
