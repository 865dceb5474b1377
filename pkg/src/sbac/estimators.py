"""Phase one of training: clone the data policy and evaluate it.

Behavior cloning fits mu_hat by maximum likelihood on dataset actions.
Fitted Q-evaluation regresses Q toward r + gamma * Q_target(s', a') using the
dataset's own next actions (never the learned policy's), with a Polyak-averaged
target copy. Both run off the same minibatch stream.
"""

from __future__ import annotations

import numpy as np

from .data import Batch, TransitionDataset, sample_batch
from .envs import TabularEnv, make_env, one_hot
from .errors import DataError, DivergenceError
from .nets import Adam, Mlp, polyak_update
from .policies import GaussianTanhPolicy, SoftmaxPolicy

__all__ = ["TargetCopy", "QEstimate", "bc_loss", "fqe_step", "train_phase_one", "build_behavior_model", "build_q"]

GUARD_FACTOR = 1e3
GUARD_FLOOR = 0.01  # keeps the 1e3x divergence guard meaningful when the initial loss is near zero


class TargetCopy:
    """Polyak-averaged shadow of a value net."""

    def __init__(self, net: Mlp, tau: float):
        self.net = net.copy()
        self.tau = float(tau)

    def update(self, source_params: np.ndarray) -> None:
        self.net.set_params(polyak_update(self.net.get_params(), source_params, self.tau))


class QEstimate:
    """Scalar action-value net over (state, action) features, plus its target copy.

    Tabular tasks use an exact table (one-hot over state-action pairs, no
    hidden layers) unless hidden sizes are requested; continuous tasks take
    raw (s, a) concatenation so the value's action gradient is available.
    """

    def __init__(self, mode: str, n_states: int = 0, n_actions: int = 0,
                 state_dim: int = 0, action_dim: int = 0, hidden=(), lr: float = 1e-4,
                 tau: float = 0.005, rng=None):
        self.mode = mode
        self.n_states, self.n_actions = n_states, n_actions
        self.state_dim, self.action_dim = state_dim, action_dim
        if mode == "tabular-paired":
            in_dim = n_states * n_actions
        elif mode == "tabular-concat":
            in_dim = n_states + n_actions
        elif mode == "continuous":
            in_dim = state_dim + action_dim
        else:
            raise ValueError(f"unknown feature mode {mode!r}")
        self.net = Mlp([in_dim, *hidden, 1], rng=rng, final_scale=0.01)
        self.target = TargetCopy(self.net, tau)
        self.opt = Adam(self.net.n_params, lr=lr)
        self.max_seen = 0.0  # running max prediction; the value-ceiling monitor reads this

    def featurize(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        if self.mode == "tabular-paired":
            pair = np.asarray(states, dtype=int) * self.n_actions + np.asarray(actions, dtype=int)
            return one_hot(pair, self.n_states * self.n_actions)
        if self.mode == "tabular-concat":
            return np.concatenate(
                [one_hot(states, self.n_states), one_hot(actions, self.n_actions)], axis=1)
        return np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=1)

    def value(self, states, actions, net: Mlp | None = None) -> np.ndarray:
        net = net or self.net
        v = net.forward(self.featurize(states, actions))[:, 0]
        self.max_seen = max(self.max_seen, float(v.max()) if v.size else 0.0)
        return v

    def values_all_actions(self, states: np.ndarray) -> np.ndarray:
        """Q(s, a) for every action of every batch state (tabular modes only)."""
        states = np.asarray(states, dtype=int)
        n, A = states.shape[0], self.n_actions
        rep_s = np.repeat(states, A)
        rep_a = np.tile(np.arange(A), n)
        return self.value(rep_s, rep_a).reshape(n, A)

    def value_and_action_grad(self, states: np.ndarray, actions: np.ndarray):
        """(Q(s,a), dQ/da) for continuous actions."""
        if self.mode != "continuous":
            raise ValueError("action gradients require continuous features")
        feats = self.featurize(states, actions)
        out, cache = self.net.forward_cached(feats)
        v = out[:, 0]
        self.max_seen = max(self.max_seen, float(v.max()) if v.size else 0.0)
        _, g_in = self.net.backward(cache, np.ones_like(out))
        return v, g_in[:, self.state_dim :]


def bc_loss(model, batch: Batch):
    """Mean negative log likelihood of the batch actions and its gradient."""
    if batch.states.shape[0] == 0:
        raise DataError("empty behavior-cloning batch")
    return model.nll_grad(batch.states, batch.actions)


def fqe_step(q: QEstimate, target_q: TargetCopy, batch: Batch, gamma: float) -> float:
    """One fitted-evaluation step: squared error to r + gamma * Q_target(s', a').

    Terminal transitions bootstrap nothing (y = r). Takes one Adam step on the
    value net and one Polyak step on the target. The evaluated policy is
    whatever generated the data: no policy object enters here.
    """
    y_next = target_q.net.forward(q.featurize(batch.next_states, batch.next_actions))[:, 0]
    y = batch.rewards + gamma * (1.0 - batch.dones) * y_next
    feats = q.featurize(batch.states, batch.actions)
    out, cache = q.net.forward_cached(feats)
    v = out[:, 0]
    q.max_seen = max(q.max_seen, float(v.max()), float(y_next.max()) if y_next.size else 0.0)
    n = v.shape[0]
    loss = float(np.mean((y - v) ** 2))
    grad, _ = q.net.backward(cache, (2.0 * (v - y) / n)[:, None])
    q.net.set_params(q.opt.step(q.net.get_params(), grad))
    target_q.update(q.net.get_params())
    return loss


def _hidden_sizes(spec: str):
    if spec in ("", "none"):
        return ()
    return tuple(int(x) for x in spec.split(",") if x.strip())


def build_behavior_model(env, config, rng):
    if isinstance(env, TabularEnv):
        hidden = () if config.policy_hidden == "auto" else _hidden_sizes(config.policy_hidden)
        return SoftmaxPolicy(env.n_states, env.n_actions, hidden=hidden, rng=rng)
    hidden = (64, 64) if config.policy_hidden == "auto" else _hidden_sizes(config.policy_hidden)
    return GaussianTanhPolicy(env.state_dim, env.action_dim, hidden=hidden, rng=rng)


def build_q(env, config, rng) -> QEstimate:
    if isinstance(env, TabularEnv):
        hidden = () if config.q_hidden == "auto" else _hidden_sizes(config.q_hidden)
        mode = "tabular-paired" if not hidden else "tabular-concat"
        return QEstimate(mode, n_states=env.n_states, n_actions=env.n_actions,
                         hidden=hidden, lr=config.lr_critic, tau=config.tau, rng=rng)
    hidden = (64, 64) if config.q_hidden == "auto" else _hidden_sizes(config.q_hidden)
    return QEstimate("continuous", state_dim=env.state_dim, action_dim=env.action_dim,
                     hidden=hidden, lr=config.lr_critic, tau=config.tau, rng=rng)


def train_phase_one(dataset: TransitionDataset, config, rng=None, sink=None, env=None):
    """Run the cloning + evaluation loop for config.phase1_steps minibatches."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    if env is None:
        env = make_env(config.env, gamma=config.gamma)
    mu = build_behavior_model(env, config, rng)
    q = build_q(env, config, rng)
    bc_opt = Adam(mu.net.n_params, lr=config.lr_behavior)
    guard = None
    for step in range(config.phase1_steps):
        batch = sample_batch(dataset, config.batch_size, rng)
        b_loss, b_grad = bc_loss(mu, batch)
        mu.net.set_params(bc_opt.step(mu.net.get_params(), b_grad))
        f_loss = fqe_step(q, q.target, batch, config.gamma)
        if guard is None:
            guard = GUARD_FACTOR * max(f_loss, GUARD_FLOOR)
        if f_loss > guard or not np.isfinite(f_loss):
            raise DivergenceError(f"fqe loss diverged at step {step}: {f_loss}",
                                  loss_name="fqe_loss", step=step, value=f_loss)
        if sink is not None:
            sink(step=step, bc_loss=b_loss, fqe_loss=f_loss)
    return mu, q
