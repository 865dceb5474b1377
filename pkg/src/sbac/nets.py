"""Dense networks with hand-derived reverse-mode gradients, Adam, and Polyak targets.

Everything is float64 and operates on flat parameter vectors so that optimizer
state, checkpoints, and finite-difference checks share one representation.
No autodiff graph: each loss that needs gradients chains through
``Mlp.backward`` by hand.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Mlp", "Adam", "polyak_update", "numerical_grad", "grad_rel_err"]


class Mlp:
    """Fully connected net, ReLU hidden activations, linear output.

    ``sizes`` is ``[d_in, h1, ..., d_out]``; an empty hidden list gives a plain
    linear map (used as an exact table on one-hot features). Weights use
    uniform fan-in init; ``final_scale`` shrinks the output layer (near-zero
    initial policy means keep tanh log-densities well conditioned).
    """

    def __init__(self, sizes, rng: np.random.Generator | None = None, final_scale: float = 1.0):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.sizes = [int(s) for s in sizes]
        if rng is None:
            rng = np.random.default_rng(0)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            b = np.zeros(fan_out)
            if i == len(self.sizes) - 2:
                w = w * final_scale
            self.weights.append(w)
            self.biases.append(b)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def get_params(self) -> np.ndarray:
        """Flat copy of all parameters (weights then bias, layer by layer)."""
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {flat.shape}")
        i = 0
        for li in range(self.n_layers):
            w = self.weights[li]
            self.weights[li] = flat[i : i + w.size].reshape(w.shape).copy()
            i += w.size
            b = self.biases[li]
            self.biases[li] = flat[i : i + b.size].copy()
            i += b.size

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Evaluate the net on a batch ``x`` of shape (n, d_in)."""
        y, _ = self.forward_cached(x)
        return y

    def forward_cached(self, x: np.ndarray):
        """Forward pass keeping the per-layer activations needed by backward."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.sizes[0]:
            raise ValueError(f"input must be (n, {self.sizes[0]}), got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite input")
        acts = [x]
        h = x
        for li in range(self.n_layers):
            z = h @ self.weights[li].T + self.biases[li]
            if li < self.n_layers - 1:
                h = np.maximum(z, 0.0)
            else:
                h = z
            acts.append(h)
        return h, acts

    def backward(self, cache, grad_out: np.ndarray):
        """Backprop ``grad_out`` (n, d_out) through a cached forward pass.

        Returns ``(flat_param_grad, grad_input)`` where the parameter gradient
        is of the batch *sum*; put any 1/n into ``grad_out``.
        """
        acts = cache
        delta = np.asarray(grad_out, dtype=float)
        if delta.shape != acts[-1].shape:
            raise ValueError(f"grad_out shape {delta.shape} != output shape {acts[-1].shape}")
        grads_w = [None] * self.n_layers
        grads_b = [None] * self.n_layers
        for li in reversed(range(self.n_layers)):
            grads_w[li] = delta.T @ acts[li]
            grads_b[li] = delta.sum(axis=0)
            delta = delta @ self.weights[li]
            if li > 0:
                # ReLU mask: acts[li] is the post-activation of layer li-1's output.
                delta = delta * (acts[li] > 0.0)
        flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in zip(grads_w, grads_b)])
        return flat, delta

    def copy(self) -> "Mlp":
        clone = Mlp.__new__(Mlp)
        clone.sizes = list(self.sizes)
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        return clone


class Adam:
    """Adam over a flat parameter vector (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, n_params: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)

    def step(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        grads = np.asarray(grads, dtype=float)
        if grads.shape != self.m.shape:
            raise ValueError("gradient shape does not match optimizer state")
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grads * grads
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def polyak_update(target: np.ndarray, source: np.ndarray, tau: float) -> np.ndarray:
    """Exponential target blend: tau*source + (1-tau)*target."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must be in [0, 1]")
    return tau * np.asarray(source, dtype=float) + (1.0 - tau) * np.asarray(target, dtype=float)


def numerical_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def grad_rel_err(g: np.ndarray, g_ref: np.ndarray) -> float:
    """Worst per-coordinate relative error, with a scale-aware denominator.

    Coordinates far below the dominant gradient scale are compared against
    that scale instead of their own (absolute FD noise would otherwise blow
    up the ratio on near-zero entries).
    """
    g = np.asarray(g, dtype=float)
    g_ref = np.asarray(g_ref, dtype=float)
    scale = max(np.abs(g_ref).max(), np.abs(g).max(), 1e-12)
    denom = np.maximum(np.abs(g_ref), 1e-3 * scale)
    return float(np.max(np.abs(g - g_ref) / denom))
