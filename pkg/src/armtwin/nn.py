"""Small dense networks in float64 numpy with hand-written backprop.

Forward passes cache what the backward pass needs; gradients accumulate
on the layers until `zero_grads`. An Adam optimizer updates parameter
arrays in place. Everything is deterministic given the init generator.
"""

from __future__ import annotations

import numpy as np


def orthogonal_init(rng: np.random.Generator, out_dim: int, in_dim: int, gain: float = 1.0) -> np.ndarray:
    """Orthogonal weight matrix scaled by `gain` (QR of a Gaussian draw)."""
    raw = rng.standard_normal((max(out_dim, in_dim), min(out_dim, in_dim)))
    q, r = np.linalg.qr(raw)
    q = q * np.sign(np.diag(r))
    if out_dim < in_dim:
        q = q.T
    return gain * q[:out_dim, :in_dim]


class Dense:
    """Affine layer y = x @ W.T + b."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, scale: float | str = "orthogonal"):
        if scale == "orthogonal":
            self.weight = orthogonal_init(rng, out_dim, in_dim)
        else:
            self.weight = float(scale) * rng.standard_normal((out_dim, in_dim))
        self.bias = np.zeros(out_dim)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._x: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.weight.T + self.bias

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        self.grad_weight += grad_out.T @ self._x
        self.grad_bias += grad_out.sum(axis=0)
        return grad_out @ self.weight

    def params(self) -> list[np.ndarray]:
        return [self.weight, self.bias]

    def grads(self) -> list[np.ndarray]:
        return [self.grad_weight, self.grad_bias]

    def zero_grads(self) -> None:
        self.grad_weight[:] = 0.0
        self.grad_bias[:] = 0.0


class Tanh:
    def __init__(self):
        self._out: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._out = np.tanh(x)
        return self._out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return grad_out * (1.0 - self._out**2)

    def params(self) -> list[np.ndarray]:
        return []

    def grads(self) -> list[np.ndarray]:
        return []

    def zero_grads(self) -> None:
        pass


class Sequential:
    def __init__(self, layers: list):
        self.layers = layers

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def grads(self) -> list[np.ndarray]:
        return [g for layer in self.layers for g in layer.grads()]

    def zero_grads(self) -> None:
        for layer in self.layers:
            layer.zero_grads()


def mlp(sizes: tuple[int, ...], rng: np.random.Generator, head_scale: float | str | None = None) -> Sequential:
    """Tanh MLP over `sizes`; the final Dense is linear, optionally rescaled."""
    layers: list = []
    for i in range(len(sizes) - 1):
        last = i == len(sizes) - 2
        scale = head_scale if (last and head_scale is not None) else "orthogonal"
        layers.append(Dense(sizes[i], sizes[i + 1], rng, scale=scale))
        if not last:
            layers.append(Tanh())
    return Sequential(layers)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


class Adam:
    """Adam with bias correction over a fixed list of parameter arrays."""

    def __init__(self, params: list[np.ndarray], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameter list")
        self.t += 1
        correct1 = 1.0 - self.beta1**self.t
        correct2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite gradient")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / correct1) / (np.sqrt(v / correct2) + self.eps)


def flatten_params(params: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([p.ravel() for p in params])


def assign_params(params: list[np.ndarray], flat: np.ndarray) -> None:
    offset = 0
    for p in params:
        n = p.size
        p[...] = flat[offset : offset + n].reshape(p.shape)
        offset += n
    if offset != flat.size:
        raise ValueError("flat vector size does not match parameters")
