"""Minimal dense networks on flat float64 parameter vectors.

Both trainable components (the selection policy and the transition model) are
small multilayer perceptrons. Keeping parameters as one flat vector with an
explicit backward pass makes gradient buffers, checkpointing and
finite-difference verification straightforward, and keeps training
bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import numpy as np


class MLP:
    """Fully connected net: linear layers with tanh on hidden layers, linear output.

    Parameters live in a single flat float64 vector owned by the caller; the
    class only knows the layout. All methods are pure with respect to the
    parameter vector.
    """

    def __init__(self, sizes: tuple[int, ...]):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        self._slices = []
        off = 0
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            self._slices.append((off, off + fan_in * fan_out, (fan_in, fan_out)))
            off += fan_in * fan_out
            self._slices.append((off, off + fan_out, (fan_out,)))
            off += fan_out
        self.num_params = off

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        params = np.zeros(self.num_params)
        for layer in range(len(self.sizes) - 1):
            w0, w1, (fan_in, fan_out) = self._slices[2 * layer]
            scale = np.sqrt(1.0 / fan_in)
            params[w0:w1] = rng.normal(0.0, scale, size=fan_in * fan_out)
        return params

    def _layers(self, params: np.ndarray):
        out = []
        for layer in range(len(self.sizes) - 1):
            w0, w1, shape = self._slices[2 * layer]
            b0, b1, _ = self._slices[2 * layer + 1]
            out.append((params[w0:w1].reshape(shape), params[b0:b1]))
        return out

    def forward(self, params: np.ndarray, x: np.ndarray):
        """Forward pass on a (batch, in) or (in,) array. Returns (output, cache)."""
        squeeze = x.ndim == 1
        h = np.atleast_2d(np.asarray(x, dtype=np.float64))
        acts = [h]
        layers = self._layers(params)
        for i, (w, b) in enumerate(layers):
            z = h @ w + b
            h = np.tanh(z) if i < len(layers) - 1 else z
            acts.append(h)
        out = acts[-1][0] if squeeze else acts[-1]
        return out, acts

    def backward(self, params: np.ndarray, acts: list, dout: np.ndarray) -> np.ndarray:
        """Gradient of sum(dout * output) w.r.t. params, as a flat vector."""
        grad = np.zeros_like(params)
        delta = np.atleast_2d(np.asarray(dout, dtype=np.float64))
        layers = self._layers(params)
        for i in range(len(layers) - 1, -1, -1):
            w, _ = layers[i]
            h_in, h_out = acts[i], acts[i + 1]
            if i < len(layers) - 1:
                delta = delta * (1.0 - h_out * h_out)
            w0, w1, _ = self._slices[2 * i]
            b0, b1, _ = self._slices[2 * i + 1]
            grad[w0:w1] = (h_in.T @ delta).ravel()
            grad[b0:b1] = delta.sum(axis=0)
            if i > 0:
                delta = delta @ w.T
        return grad


class Adam:
    """Standard Adam updates over a flat parameter vector."""

    def __init__(self, num_params: int, lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(num_params)
        self.v = np.zeros(num_params)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """One descent step along grad; negate grad for ascent."""
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar f at x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        step = h * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        g[i] = (f(xp) - f(xm)) / (2.0 * step)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst-coordinate relative disagreement between two gradients."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
