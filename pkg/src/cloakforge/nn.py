"""Shared layer primitives with hand-written backward passes.

Everything operates on float64 numpy arrays; activations are NCHW. Each
forward returns what its backward needs, so gradients are exact (verified
against finite differences in the test suite) rather than approximated.
"""

from __future__ import annotations

import numpy as np

from . import kernels


def silu(x: np.ndarray) -> np.ndarray:
    """x * sigmoid(x). Smooth, so finite-difference gradient checks behave."""
    return x / (1.0 + np.exp(-x))


def silu_grad(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-x))
    return dy * s * (1.0 + x * (1.0 - s))


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(n, din) @ (din, dout) + b."""
    return x @ w + b


def linear_grad(x, w, dy):
    """Returns (dx, dw, db)."""
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


def conv3x3(x, w, b):
    return kernels.conv3x3(x, w, b)


def conv3x3_grad(x, w, dy):
    """Returns (dx, dw, db)."""
    dx = kernels.conv3x3_grad_input(dy, w)
    dw = kernels.conv3x3_grad_weight(dy, x)
    db = dy.sum(axis=(0, 2, 3))
    return dx, dw, db


def avgpool2(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avgpool2_grad(dy: np.ndarray) -> np.ndarray:
    n, c, h, w = dy.shape
    return np.repeat(np.repeat(dy, 2, axis=2), 2, axis=3) * 0.25


def upsample2(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour 2x upsampling."""
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample2_grad(dy: np.ndarray) -> np.ndarray:
    n, c, h, w = dy.shape
    return dy.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def film(h: np.ndarray, scale: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """Per-channel modulation h * (1 + scale) + shift; scale/shift are (n, c)."""
    return h * (1.0 + scale)[:, :, None, None] + shift[:, :, None, None]


def film_grad(h, scale, dy):
    """Returns (dh, dscale, dshift)."""
    dh = dy * (1.0 + scale)[:, :, None, None]
    dscale = (dy * h).sum(axis=(2, 3))
    dshift = dy.sum(axis=(2, 3))
    return dh, dscale, dshift


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, (n,) -> (n, dim)."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean CE loss and its gradient w.r.t. the logits."""
    p = softmax(logits)
    n = logits.shape[0]
    loss = -np.log(p[np.arange(n), labels] + 1e-300).mean()
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


class SgdOptimizer:
    """Plain momentum-free gradient descent on a parameter dict."""

    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict, grads: dict) -> None:
        for k, g in grads.items():
            params[k] -= self.lr * g


class AdamOptimizer:
    """Adam on a parameter dict. State is keyed by parameter name."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            m = self.m[k]
            v = self.v[k]
            if m.shape != params[k].shape:
                # Embedding tables grow as new tokens are seen mid-run.
                pad = [(0, params[k].shape[i] - m.shape[i]) for i in range(m.ndim)]
                m = self.m[k] = np.pad(m, pad)
                v = self.v[k] = np.pad(v, pad)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mh = m / (1 - b1**self.t)
            vh = v / (1 - b2**self.t)
            params[k] -= self.lr * mh / (np.sqrt(vh) + self.eps)


def make_optimizer(name: str, lr: float, **kw):
    if name == "sgd":
        return SgdOptimizer(lr)
    if name == "adam":
        return AdamOptimizer(lr, **kw)
    raise ValueError(f"unknown optimizer {name!r}; expected 'sgd' or 'adam'")
