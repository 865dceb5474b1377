"""Policy representations: tabular rows, softmax nets, and squashed Gaussians.

The squashed Gaussian is the continuous-action workhorse: an MLP trunk emits
per-dimension mean and log-std, actions are tanh-squashed into [-1, 1], and
log densities carry the change-of-variables correction. All gradient paths
(parameters, and the density's gradient in the action argument) are derived
by hand against the trunk's backward pass.
"""

from __future__ import annotations

import numpy as np

from .envs import one_hot
from .nets import Mlp

__all__ = [
    "TabularPolicy",
    "SoftmaxPolicy",
    "GaussianTanhPolicy",
    "PointMassController",
    "ZeroPolicy",
    "pointmass_behavior",
]

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
ATANH_CLIP = 1.0 - 1e-6
DENSITY_EPS = 1e-6
LOG_2PI = float(np.log(2.0 * np.pi))


class TabularPolicy:
    """Explicit row-stochastic action probabilities pi[s, a]."""

    def __init__(self, probs: np.ndarray):
        probs = np.asarray(probs, dtype=float)
        if probs.ndim != 2:
            raise ValueError("probs must be (S, A)")
        if np.any(probs < -1e-12):
            raise ValueError("negative action probability")
        if np.max(np.abs(probs.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("policy rows must sum to 1 within 1e-12")
        self.probs = probs
        self.n_states, self.n_actions = probs.shape

    def act(self, state: int, rng: np.random.Generator) -> int:
        return int(rng.choice(self.n_actions, p=self.probs[state]))

    def prob(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return self.probs[np.asarray(states, dtype=int), np.asarray(actions, dtype=int)]


class SoftmaxPolicy:
    """Softmax policy over a finite action set, logits from an MLP on one-hot states.

    With no hidden layers this is an exact logit table, which is the tabular
    mode used on the grid and chain tasks.
    """

    def __init__(self, n_states: int, n_actions: int, hidden=(), rng=None, init_scale: float = 0.01):
        self.n_states = n_states
        self.n_actions = n_actions
        self.net = Mlp([n_states, *hidden, n_actions], rng=rng, final_scale=init_scale)

    # -- evaluation ---------------------------------------------------------
    def logits(self, feats: np.ndarray) -> np.ndarray:
        return self.net.forward(feats)

    def probs_from_feats(self, feats: np.ndarray) -> np.ndarray:
        z = self.logits(feats)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def probs_for_states(self, states: np.ndarray) -> np.ndarray:
        return self.probs_from_feats(one_hot(states, self.n_states))

    def prob(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        p = self.probs_for_states(states)
        return p[np.arange(p.shape[0]), np.asarray(actions, dtype=int)]

    def log_prob(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return np.log(np.maximum(self.prob(states, actions), 1e-300))

    def act(self, state: int, rng: np.random.Generator) -> int:
        p = self.probs_for_states(np.array([state]))[0]
        return int(rng.choice(self.n_actions, p=p))

    def as_matrix(self) -> np.ndarray:
        """Full pi[s, a] table (for exact evaluation against the oracles)."""
        return self.probs_from_feats(np.eye(self.n_states))

    def as_tabular(self) -> TabularPolicy:
        return TabularPolicy(self.as_matrix())

    # -- gradients ----------------------------------------------------------
    def nll_grad(self, states: np.ndarray, actions: np.ndarray):
        """Mean negative log likelihood of dataset actions and its parameter gradient."""
        feats = one_hot(states, self.n_states)
        z, cache = self.net.forward_cached(feats)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        n = feats.shape[0]
        idx = np.arange(n)
        a = np.asarray(actions, dtype=int)
        loss = -float(np.mean(np.log(np.maximum(p[idx, a], 1e-300))))
        gz = p.copy()
        gz[idx, a] -= 1.0
        grad, _ = self.net.backward(cache, gz / n)
        return loss, grad

    def expected_score_grad(self, states: np.ndarray, scores: np.ndarray):
        """Loss -mean_s sum_a pi(a|s) scores[s, a] and its gradient (scores held fixed)."""
        feats = one_hot(states, self.n_states)
        z, cache = self.net.forward_cached(feats)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        n = feats.shape[0]
        expected = np.sum(p * scores, axis=1)
        loss = -float(np.mean(expected))
        # d(-sum_a p_a g_a)/dz_b = -p_b (g_b - sum_a p_a g_a)
        gz = -p * (scores - expected[:, None])
        grad, _ = self.net.backward(cache, gz / n)
        return loss, grad


class GaussianTanhPolicy:
    """tanh(Normal(mean(s), std(s))) with log-std clamped to [-5, 2]."""

    def __init__(self, state_dim: int, action_dim: int, hidden=(64, 64), rng=None, final_scale: float = 0.01):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.net = Mlp([state_dim, *hidden, 2 * action_dim], rng=rng, final_scale=final_scale)
        self.clamp_count = 0  # dataset actions nudged off the tanh boundary

    # -- heads ---------------------------------------------------------------
    def _heads(self, out: np.ndarray):
        mean = out[:, : self.action_dim]
        raw = out[:, self.action_dim :]
        log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        mask = (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)
        return mean, log_std, mask

    def heads(self, states: np.ndarray):
        mean, log_std, _ = self._heads(self.net.forward(np.atleast_2d(states)))
        return mean, log_std

    # -- sampling ------------------------------------------------------------
    def sample(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        states = np.atleast_2d(states)
        eps = rng.standard_normal((states.shape[0], self.action_dim))
        return self.sample_with_noise(states, eps)

    def sample_with_noise(self, states: np.ndarray, eps: np.ndarray) -> np.ndarray:
        mean, log_std = self.heads(states)
        return np.tanh(mean + np.exp(log_std) * eps)

    def act(self, state: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return self.sample(np.asarray(state, dtype=float)[None, :], rng)[0]

    # -- densities -----------------------------------------------------------
    def _clamp_actions(self, actions: np.ndarray) -> np.ndarray:
        actions = np.asarray(actions, dtype=float)
        clipped = np.clip(actions, -ATANH_CLIP, ATANH_CLIP)
        self.clamp_count += int(np.sum(np.abs(actions) > ATANH_CLIP))
        return clipped

    def log_prob(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(states)
        a = self._clamp_actions(np.atleast_2d(actions))
        mean, log_std = self.heads(states)
        u = np.arctanh(a)
        std = np.exp(log_std)
        base = -0.5 * ((u - mean) / std) ** 2 - log_std - 0.5 * LOG_2PI
        corr = -np.log(1.0 - a * a + DENSITY_EPS)
        return np.sum(base + corr, axis=1)

    def log_prob_action_grad(self, states: np.ndarray, actions: np.ndarray):
        """(log pi(a|s), d log pi / d a) for a fixed policy; used by the actor objective."""
        states = np.atleast_2d(states)
        a = self._clamp_actions(np.atleast_2d(actions))
        mean, log_std = self.heads(states)
        u = np.arctanh(a)
        std = np.exp(log_std)
        base = -0.5 * ((u - mean) / std) ** 2 - log_std - 0.5 * LOG_2PI
        corr = -np.log(1.0 - a * a + DENSITY_EPS)
        lp = np.sum(base + corr, axis=1)
        du_da = 1.0 / (1.0 - a * a)  # atanh'(a)
        grad = -((u - mean) / std**2) * du_da + 2.0 * a / (1.0 - a * a + DENSITY_EPS)
        return lp, grad

    # -- gradient plumbing ----------------------------------------------------
    def nll_grad(self, states: np.ndarray, actions: np.ndarray):
        """Mean NLL of dataset actions and its gradient w.r.t. trunk parameters."""
        states = np.atleast_2d(states)
        a = self._clamp_actions(np.atleast_2d(actions))
        out, cache = self.net.forward_cached(states)
        mean, log_std, mask = self._heads(out)
        u = np.arctanh(a)
        std = np.exp(log_std)
        z = (u - mean) / std
        base = -0.5 * z**2 - log_std - 0.5 * LOG_2PI
        corr = -np.log(1.0 - a * a + DENSITY_EPS)
        loss = -float(np.mean(np.sum(base + corr, axis=1)))
        n = states.shape[0]
        # d log p / d mean = (u-m)/std^2 ; d log p / d log_std = z^2 - 1 (0 where clamped)
        g_mean = -(u - mean) / std**2
        g_log_std = -(z**2 - 1.0) * mask
        grad, _ = self.net.backward(cache, np.concatenate([g_mean, g_log_std], axis=1) / n)
        return loss, grad

    def sample_and_param_grad(self, states: np.ndarray, eps: np.ndarray):
        """Reparameterized actions plus a closure mapping dL/da to dL/dparams."""
        states = np.atleast_2d(states)
        out, cache = self.net.forward_cached(states)
        mean, log_std, mask = self._heads(out)
        std = np.exp(log_std)
        a = np.tanh(mean + std * eps)
        jac = 1.0 - a * a  # d tanh(u)/du

        def backprop(grad_a: np.ndarray) -> np.ndarray:
            g_mean = grad_a * jac
            g_log_std = grad_a * jac * std * eps * mask
            grad, _ = self.net.backward(cache, np.concatenate([g_mean, g_log_std], axis=1))
            return grad

        return a, backprop


class PointMassController:
    """Scripted proportional controller used only to generate offline data."""

    action_dim = 2

    def __init__(self, goal, gain: float = 3.0, noise_std: float = 0.05, eps_random: float = 0.0):
        self.goal = np.asarray(goal, dtype=float)
        self.gain = gain
        self.noise_std = noise_std
        self.eps_random = eps_random

    def act(self, state: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.eps_random > 0 and rng.uniform() < self.eps_random:
            return rng.uniform(-1.0, 1.0, size=2)
        a = self.gain * (self.goal - np.asarray(state, dtype=float))
        if self.noise_std > 0:
            a = a + self.noise_std * rng.standard_normal(2)
        return np.clip(a, -1.0, 1.0)


class ZeroPolicy:
    action_dim = 2

    def act(self, state, rng):
        return np.zeros(2)


def pointmass_behavior(env, tier: str):
    """Data-policy menu for the point mass, mirroring the tabular tiers."""
    if tier == "expert":
        return PointMassController(env.goal, gain=3.0, noise_std=0.05)
    if tier == "medium":
        return PointMassController(env.goal, gain=3.0, noise_std=0.4, eps_random=0.1)
    if tier == "random":
        return PointMassController(env.goal, gain=0.0, noise_std=0.0, eps_random=1.0)
    raise ValueError(f"unknown behavior tier {tier!r}")
