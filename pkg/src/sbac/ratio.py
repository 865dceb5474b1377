"""Sample-based estimation of the state visitation ratio w(s) = d_pi(s)/d_mu(s).

The estimator minimizes a kernel discrepancy between w and its backward-flow
image over minibatches of transitions. Per sample the flow image of w at the
next state s' is estimated from the transition that produced s':
    (1-gamma) * [initial-state mass] + gamma * (pi/mu)(a|s) * w(s),
so the minibatch loss is a quadratic form over the atoms {s'_i} (weighted
gamma*rho_i*w(s_i) - w(s'_i)) and resampled episode-start states (weighted
1-gamma). The default "u" pairing drops the same-sample diagonal, making the
estimate unbiased for the population discrepancy; the "v" pairing keeps the
full quadratic form, which is nonnegative by kernel positive-definiteness.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DivergenceError
from .nets import Adam, Mlp

__all__ = [
    "KernelSpec",
    "kernel_matrix",
    "median_bandwidth",
    "RatioModel",
    "importance_weights",
    "mmd_loss",
    "train_ratio",
    "normalized_ratios",
]

LOG_W_CLIP = 2.0
MU_FLOOR = 1e-4


@dataclass(frozen=True)
class KernelSpec:
    """family: gaussian -> exp(-||x-y||^2 / (2 bw^2)); laplacian -> exp(-||x-y||_1 / bw).

    bandwidth None means: resolve by the median heuristic on the first batch
    of states seen by training, then freeze.
    """

    family: str = "gaussian"
    bandwidth: float | None = None

    def __post_init__(self):
        if self.family not in ("gaussian", "laplacian"):
            raise ValueError(f"unknown kernel family {self.family!r}")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")


def _pairwise_sq(xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    na = np.sum(xa * xa, axis=1)
    nb = np.sum(xb * xb, axis=1)
    return np.maximum(na[:, None] + nb[None, :] - 2.0 * (xa @ xb.T), 0.0)


def _pairwise_l1(xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    diff = xa[:, None, :] - xb[None, :, :]
    return np.sum(np.abs(diff), axis=2)


def kernel_matrix(points_a: np.ndarray, points_b: np.ndarray, spec: KernelSpec) -> np.ndarray:
    """K[i, j] = k(a_i, b_j); unit diagonal when a is b."""
    if spec.bandwidth is None:
        raise ValueError("bandwidth not resolved; call median_bandwidth first")
    xa = np.atleast_2d(np.asarray(points_a, dtype=float))
    xb = np.atleast_2d(np.asarray(points_b, dtype=float))
    if not (np.all(np.isfinite(xa)) and np.all(np.isfinite(xb))):
        raise ValueError("non-finite kernel inputs")
    if spec.family == "gaussian":
        return np.exp(-_pairwise_sq(xa, xb) / (2.0 * spec.bandwidth**2))
    return np.exp(-_pairwise_l1(xa, xb) / spec.bandwidth)


def median_bandwidth(points: np.ndarray, family: str = "gaussian") -> float:
    """Median of positive pairwise distances (L2 for gaussian, L1 for laplacian)."""
    x = np.atleast_2d(np.asarray(points, dtype=float))
    if family == "gaussian":
        d = np.sqrt(np.maximum(_pairwise_sq(x, x), 0.0))
    else:
        d = _pairwise_l1(x, x)
    vals = d[np.triu_indices(d.shape[0], k=1)]
    vals = vals[vals > 0.0]
    if vals.size == 0:
        return 1.0
    return float(np.median(vals))


def resolve_kernel(spec: KernelSpec, points: np.ndarray) -> KernelSpec:
    if spec.bandwidth is not None:
        return spec
    return replace(spec, bandwidth=median_bandwidth(points, spec.family))


class RatioModel:
    """State -> w(s) = exp(clip_c(raw(s))) with log w confined to (-c, c), c = 2.

    The clip is the smooth saturation c*tanh(raw/c): near zero it is the
    identity, at the boundary it flattens instead of zeroing the gradient, so
    a ratio pinned at the cap can still be pulled back by later updates.
    """

    def __init__(self, state_dim: int, hidden=(64, 64), clip: float = LOG_W_CLIP, rng=None):
        self.net = Mlp([state_dim, *hidden, 1], rng=rng, final_scale=0.01)
        self.clip = float(clip)

    def log_w(self, feats: np.ndarray) -> np.ndarray:
        raw = self.net.forward(np.atleast_2d(feats))[:, 0]
        return self.clip * np.tanh(raw / self.clip)

    def w(self, feats: np.ndarray) -> np.ndarray:
        return np.exp(self.log_w(feats))

    def w_cached(self, feats: np.ndarray):
        """(w, backward-cache, d log_w/d raw) for gradient assembly."""
        out, cache = self.net.forward_cached(np.atleast_2d(feats))
        raw = out[:, 0]
        t = np.tanh(raw / self.clip)
        w = np.exp(self.clip * t)
        return w, cache, 1.0 - t * t


def normalized_ratios(ratio_model: RatioModel, feats: np.ndarray) -> np.ndarray:
    """Batch ratios divided by their mean, so the output averages to exactly 1."""
    w = ratio_model.w(feats)
    return w / w.mean()


def importance_weights(policy, mu_model, states, actions, floor: float = MU_FLOOR):
    """(pi/mu)(a|s) with the behavior density floored; returns (ratio, n_floored)."""
    if hasattr(policy, "prob"):
        pi_a = policy.prob(states, actions)
        mu_a = mu_model.prob(states, actions)
    else:
        pi_a = np.exp(policy.log_prob(states, actions))
        mu_a = np.exp(mu_model.log_prob(states, actions))
    floored = mu_a < floor
    return pi_a / np.maximum(mu_a, floor), int(np.sum(floored))


def mmd_loss(ratio_model: RatioModel, rho: np.ndarray, s_feats: np.ndarray,
             sp_feats: np.ndarray, start_feats: np.ndarray, gamma: float,
             kernel: KernelSpec, pairing: str = "u", anchor: float = 1.0):
    """Kernel discrepancy between w and its per-sample backward-flow image.

    Returns (loss, flat parameter gradient, stats). rho holds the floored
    importance weights (pi/mu)(a_i|s_i) of the sampled transitions; gradients
    reach the ratio net through both w(s_i) and w(s'_i).

    anchor adds a penalty estimating anchor*(E[w(s)] - 1)^2. The flow residual
    alone pins the overall scale of w only through an O((1-gamma)^2) term, far
    below the minibatch noise floor at gamma near 1, and the batch states
    average the ratio to one at the fixed point anyway; the anchor vanishes
    there. Under the "u" pairing the penalty is the product of two half-batch
    means (unbiased: a squared full-batch mean would add Var(w)/n, which
    systematically compresses the ratios); under "v" it is the squared mean,
    keeping every term of the loss a nonnegative quadratic form.
    """
    if pairing not in ("u", "v"):
        raise ValueError("pairing must be 'u' or 'v'")
    rho = np.asarray(rho, dtype=float)
    n = rho.shape[0]
    if n < 2:
        raise ValueError("need at least 2 transitions")
    m = np.atleast_2d(start_feats).shape[0]
    w_s, cache_s, dlog_s = ratio_model.w_cached(s_feats)
    w_sp, cache_sp, dlog_sp = ratio_model.w_cached(sp_feats)
    delta = gamma * rho * w_s - w_sp

    K_tt = kernel_matrix(sp_feats, sp_feats, kernel)
    K_t0 = kernel_matrix(sp_feats, start_feats, kernel)
    K_00 = kernel_matrix(start_feats, start_feats, kernel)
    one_m_g = 1.0 - gamma

    cross_rows = K_t0.sum(axis=1)
    cross = float(delta @ cross_rows) * one_m_g / (n * m)
    if pairing == "v":
        quad = float(delta @ K_tt @ delta) / (n * n)
        const = one_m_g**2 * float(K_00.sum()) / (m * m)
        g_delta = 2.0 * (K_tt @ delta) / (n * n) + 2.0 * one_m_g * cross_rows / (n * m)
    else:
        off = K_tt - np.diag(np.diag(K_tt))
        quad = float(delta @ off @ delta) / (n * (n - 1))
        if m > 1:
            const = one_m_g**2 * float(K_00.sum() - np.trace(K_00)) / (m * (m - 1))
        else:
            const = 0.0
        g_delta = 2.0 * (off @ delta) / (n * (n - 1)) + 2.0 * one_m_g * cross_rows / (n * m)
    loss = quad + 2.0 * cross + const

    # delta_i = gamma rho_i w(s_i) - w(s'_i); dw/draw = w * dlog.
    g_ws = g_delta * gamma * rho
    g_wsp = -g_delta
    mean_w = float(np.mean(w_s))
    if anchor > 0.0:
        if pairing == "v":
            loss += anchor * (mean_w - 1.0) ** 2
            g_ws = g_ws + anchor * 2.0 * (mean_w - 1.0) / n
        else:
            half = n // 2
            m_a = float(np.mean(w_s[:half]))
            m_b = float(np.mean(w_s[half:]))
            loss += anchor * (m_a - 1.0) * (m_b - 1.0)
            g_anchor = np.empty(n)
            g_anchor[:half] = anchor * (m_b - 1.0) / half
            g_anchor[half:] = anchor * (m_a - 1.0) / (n - half)
            g_ws = g_ws + g_anchor
    grad_s, _ = ratio_model.net.backward(cache_s, (g_ws * w_s * dlog_s)[:, None])
    grad_sp, _ = ratio_model.net.backward(cache_sp, (g_wsp * w_sp * dlog_sp)[:, None])
    stats = {"mean_w": mean_w, "mean_delta_sq": float(np.mean(delta**2))}
    return float(loss), grad_s + grad_sp, stats


def train_ratio(ratio_model: RatioModel, policy, mu_model, dataset, featurize,
                steps: int, batch_size: int, lr: float, gamma: float,
                kernel: KernelSpec, rng: np.random.Generator, sink=None,
                mu_floor: float = MU_FLOOR, pairing: str = "u", anchor: float = 1.0) -> KernelSpec:
    """Minibatch training loop; resolves and returns the frozen kernel spec."""
    from .data import sample_batch

    opt = Adam(ratio_model.net.n_params, lr=lr)
    first = sample_batch(dataset, batch_size, rng)
    kernel = resolve_kernel(kernel, featurize(first.states))
    guard = None
    floored_total = 0
    for step in range(steps):
        batch = sample_batch(dataset, batch_size, rng)
        rho, n_floored = importance_weights(policy, mu_model, batch.states, batch.actions, mu_floor)
        floored_total += n_floored
        loss, grad, _ = mmd_loss(ratio_model, rho, featurize(batch.states),
                                 featurize(batch.next_states), featurize(batch.start_states),
                                 gamma, kernel, pairing=pairing, anchor=anchor)
        if guard is None:
            guard = 1e3 * max(abs(loss), 0.1)
        if abs(loss) > guard or not np.isfinite(loss):
            raise DivergenceError(f"ratio loss diverged at step {step}: {loss}",
                                  loss_name="mmd_loss", step=step, value=loss)
        params = opt.step(ratio_model.net.get_params(), grad)
        ratio_model.net.set_params(params)
        if sink is not None:
            sink(step=step, mmd_loss=loss)
    ratio_model.floored_importance_weights = floored_total
    return kernel
