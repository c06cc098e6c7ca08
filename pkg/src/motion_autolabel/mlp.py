"""Small multilayer perceptron R^3 -> R^3 with reverse-mode gradients in numpy.

Parameters are a flat list ``[W0, b0, W1, b1, ...]`` with ``W`` of shape
``(fan_in, fan_out)`` so a batch ``x`` of shape ``(N, fan_in)`` maps to
``x @ W + b``. The output layer is linear.
"""
from __future__ import annotations

import numpy as np

ACTIVATIONS = {
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, a: (z > 0).astype(z.dtype)),
    "softplus": (lambda z: np.logaddexp(0.0, z), lambda z, a: 1.0 / (1.0 + np.exp(-z))),
}


class MLP:
    def __init__(self, layers: int = 4, width: int = 64, nonlinearity: str = "tanh",
                 in_dim: int = 3, out_dim: int = 3):
        if nonlinearity not in ACTIVATIONS:
            raise ValueError(f"unknown nonlinearity {nonlinearity!r}")
        self.sizes = [in_dim] + [width] * layers + [out_dim]
        self.nonlinearity = nonlinearity
        self._act, self._dact = ACTIVATIONS[nonlinearity]

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def init_params(self, rng: np.random.Generator) -> list[np.ndarray]:
        params = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            params.append(rng.uniform(-bound, bound, size=fan_out))
        return params

    def flat_params(self, rngs) -> tuple[np.ndarray, list[np.ndarray]]:
        """Initialise one parameter set per generator inside a single flat buffer.

        Returns the buffer and the list of per-layer views into it, so an
        optimiser can update everything with a handful of vector operations.
        """
        sets = [p for rng in rngs for p in self.init_params(rng)]
        flat = np.concatenate([p.ravel() for p in sets])
        views, offset = [], 0
        for p in sets:
            views.append(flat[offset: offset + p.size].reshape(p.shape))
            offset += p.size
        return flat, views

    def num_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.sizes[:-1], self.sizes[1:]))

    def forward(self, params, x):
        """Return ``(output, cache)``; the cache feeds ``backward``."""
        cache = [x]
        h = x
        last = self.n_layers - 1
        for i in range(self.n_layers):
            z = h @ params[2 * i] + params[2 * i + 1]
            if i == last:
                h = z
                cache.append((z, None))
            else:
                h = self._act(z)
                cache.append((z, h))
        return h, cache

    def __call__(self, params, x):
        return self.forward(params, x)[0]

    def backward(self, params, cache, dout, input_grad: bool = False):
        """Gradients of ``sum(dout * output)`` w.r.t. params (and the input if asked)."""
        grads = [None] * len(params)
        g = dout
        for i in reversed(range(self.n_layers)):
            z, a = cache[i + 1]
            if a is not None:
                g = g * self._dact(z, a)
            h_in = cache[i] if i == 0 else cache[i][1]
            grads[2 * i] = h_in.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0 or input_grad:
                g = g @ params[2 * i].T
        return grads, (g if input_grad else None)


class Adam:
    """Adam with bias-corrected first and second moments."""

    def __init__(self, params, lr: float = 8e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.eps = lr, eps
        self.b1, self.b2 = betas
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
