"""Desk-scale environments: finite MDPs with exact dynamics plus a 2-D point mass.

Tabular tasks are *continuing* (no terminal states; reaching the goal teleports
back to a start state), so the uniform empirical state distribution of long
horizon-truncated episodes tracks the discounted visitation the oracles
compute. Episode ends are truncations, never environment terminals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TabularMDP",
    "TabularEnv",
    "PointMassEnv",
    "chain_mdp",
    "gridworld_mdp",
    "detour_chain_mdp",
    "random_mdp",
    "random_policy_matrix",
    "value_iteration",
    "epsilon_greedy_matrix",
    "behavior_matrix",
    "make_env",
    "one_hot",
    "GRIDWORLD_SIZE",
]

ATOL = 1e-12
GRIDWORLD_SIZE = 5


@dataclass
class TabularMDP:
    """Finite MDP (P, r, rho, gamma) with validated stochasticity.

    transition: P[s, a, s'] row-stochastic per (s, a)
    reward:     r[s, a]
    initial_dist: rho[s]
    """

    n_states: int
    n_actions: int
    transition: np.ndarray
    reward: np.ndarray
    initial_dist: np.ndarray
    discount: float

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=float)
        self.reward = np.asarray(self.reward, dtype=float)
        self.initial_dist = np.asarray(self.initial_dist, dtype=float)
        S, A = self.n_states, self.n_actions
        if self.transition.shape != (S, A, S):
            raise ValueError(f"transition must be ({S},{A},{S})")
        if self.reward.shape != (S, A):
            raise ValueError(f"reward must be ({S},{A})")
        if self.initial_dist.shape != (S,):
            raise ValueError(f"initial_dist must be ({S},)")
        if np.any(self.transition < -ATOL) or np.any(self.initial_dist < -ATOL):
            raise ValueError("negative probability entry")
        row_sums = self.transition.sum(axis=2)
        if np.max(np.abs(row_sums - 1.0)) > ATOL:
            raise ValueError("transition rows must sum to 1 within 1e-12")
        if abs(self.initial_dist.sum() - 1.0) > ATOL:
            raise ValueError("initial distribution must sum to 1 within 1e-12")
        if not (0.0 < self.discount < 1.0):
            raise ValueError("discount must lie in (0, 1)")


class TabularEnv:
    """Sampling wrapper around a TabularMDP with a fixed episode horizon."""

    def __init__(self, mdp: TabularMDP, horizon: int, name: str = "tabular",
                 terminal_states: frozenset[int] = frozenset()):
        self.mdp = mdp
        self.horizon = int(horizon)
        self.name = name
        self.terminal_states = frozenset(terminal_states)
        self.n_states = mdp.n_states
        self.n_actions = mdp.n_actions
        self.discrete = True

    def reset(self, rng: np.random.Generator) -> int:
        return int(rng.choice(self.n_states, p=self.mdp.initial_dist))

    def step(self, state: int, action: int, rng: np.random.Generator):
        p = self.mdp.transition[state, action]
        nxt = int(rng.choice(self.n_states, p=p))
        r = float(self.mdp.reward[state, action])
        return nxt, r, nxt in self.terminal_states

    def state_coords(self, states: np.ndarray) -> np.ndarray:
        """Low-dimensional coordinates in [0, 1], used by kernels and ratio nets."""
        states = np.asarray(states, dtype=int)
        if self.name.startswith("gridworld"):
            k = GRIDWORLD_SIZE
            return np.stack([states // k, states % k], axis=1) / (k - 1)
        return states[:, None] / max(self.n_states - 1, 1)


class PointMassEnv:
    """2-D point mass with bounded velocity actions and a goal-seeking reward.

    Dynamics: x' = clip(x + step_scale*a + noise, -1, 1); reward is the
    negative distance to the goal after the move. Noise is drawn from the
    episode rng, so identical seed + action sequence reproduces the trajectory.
    """

    name = "pointmass"
    discrete = False
    state_dim = 2
    action_dim = 2

    def __init__(self, horizon: int = 60, step_scale: float = 0.15, noise_std: float = 0.01,
                 start=(-0.7, -0.7), goal=(0.6, 0.6), start_spread: float = 0.1):
        self.horizon = int(horizon)
        self.step_scale = step_scale
        self.noise_std = noise_std
        self.start = np.asarray(start, dtype=float)
        self.goal = np.asarray(goal, dtype=float)
        self.start_spread = start_spread

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        s = self.start + self.start_spread * rng.uniform(-1.0, 1.0, size=2)
        return np.clip(s, -1.0, 1.0)

    def step(self, state: np.ndarray, action: np.ndarray, rng: np.random.Generator):
        action = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
        nxt = state + self.step_scale * action
        if self.noise_std > 0:
            nxt = nxt + self.noise_std * rng.standard_normal(2)
        nxt = np.clip(nxt, -1.0, 1.0)
        r = -float(np.linalg.norm(nxt - self.goal))
        return nxt, r, False

    def state_coords(self, states: np.ndarray) -> np.ndarray:
        return np.asarray(states, dtype=float)


def one_hot(idx: np.ndarray, n: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=int)
    out = np.zeros((idx.size, n))
    out[np.arange(idx.size), idx.ravel()] = 1.0
    return out


# ---------------------------------------------------------------------------
# Concrete tasks
# ---------------------------------------------------------------------------

def chain_mdp(n: int = 8, slip: float = 0.1, gamma: float = 0.99) -> TabularMDP:
    """Left/right chain with slip; entering the right end pays 1."""
    A = 2  # 0: left, 1: right
    P = np.zeros((n, A, n))
    for s in range(n):
        for a in range(A):
            move = -1 if a == 0 else 1
            intended = min(max(s + move, 0), n - 1)
            slipped = min(max(s - move, 0), n - 1)
            P[s, a, intended] += 1.0 - slip
            P[s, a, slipped] += slip
    r = np.zeros((n, A))
    for s in range(n):
        for a in range(A):
            r[s, a] = P[s, a, n - 1]
    rho = np.full(n, 1.0 / n)
    return TabularMDP(n, A, P, r, rho, gamma)


def gridworld_mdp(size: int = GRIDWORLD_SIZE, slip: float = 0.1, gamma: float = 0.99) -> TabularMDP:
    """size x size grid; entering the goal corner pays 1 and teleports to a restart.

    Restart distribution equals the (uniform over non-goal cells) initial
    distribution, which keeps the task continuing and fast mixing.
    """
    S = size * size
    A = 4  # up, right, down, left
    goal = S - 1
    moves = [(-1, 0), (0, 1), (1, 0), (0, -1)]
    rho = np.full(S, 1.0 / (S - 1))
    rho[goal] = 0.0

    def move_from(s: int, a: int) -> int:
        r_, c_ = divmod(s, size)
        dr, dc = moves[a]
        nr, nc = r_ + dr, c_ + dc
        if 0 <= nr < size and 0 <= nc < size:
            return nr * size + nc
        return s

    P = np.zeros((S, A, S))
    for s in range(S):
        for a in range(A):
            if s == goal:
                P[s, a] = rho  # teleport restart
                continue
            P[s, a, move_from(s, a)] += 1.0 - slip
            for b in range(A):
                P[s, a, move_from(s, b)] += slip / A
    r = np.zeros((S, A))
    for s in range(S):
        for a in range(A):
            r[s, a] = P[s, a, goal]
    return TabularMDP(S, A, P, r, rho, gamma)


def detour_chain_mdp(n: int = 8, slip: float = 0.02, gamma: float = 0.99,
                     pot_reward: float = 0.1, end_reward: float = 1.0) -> TabularMDP:
    """Chain whose right end pays per-step but the data policy rarely dwells there.

    Built so one-step optimization against the behavior policy dithers at the
    rewarding end (the log-barrier keeps pushing it off), while visitation-ratio
    weighting lets a policy that concentrates its occupancy there commit.
    Actions: 0 left, 1 stay, 2 right. State 0 holds a small consolation pot.
    """
    A = 3
    P = np.zeros((n, A, n))
    moves = [-1, 0, 1]
    for s in range(n):
        for a in range(A):
            intended = min(max(s + moves[a], 0), n - 1)
            P[s, a, intended] += 1.0 - slip
            for b in range(A):
                P[s, a, min(max(s + moves[b], 0), n - 1)] += slip / A
    r = np.zeros((n, A))
    r[n - 1, :] = end_reward
    r[0, 1] = pot_reward
    rho = np.zeros(n)
    rho[0] = 1.0
    return TabularMDP(n, A, P, r, rho, gamma)


def random_mdp(n_states: int, n_actions: int, gamma: float, rng: np.random.Generator) -> TabularMDP:
    """Dense Dirichlet MDP: every state reachable, rewards in [0, 1]."""
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    r = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    rho = rng.dirichlet(np.ones(n_states))
    return TabularMDP(n_states, n_actions, P, r, rho, gamma)


def random_policy_matrix(n_states: int, n_actions: int, rng: np.random.Generator) -> np.ndarray:
    return rng.dirichlet(np.ones(n_actions), size=n_states)


# ---------------------------------------------------------------------------
# Policy construction for data generation
# ---------------------------------------------------------------------------

def value_iteration(mdp: TabularMDP, tol: float = 1e-12, max_iter: int = 200_000) -> np.ndarray:
    """Optimal Q via value iteration (used only to build data policies)."""
    V = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        Q = mdp.reward + mdp.discount * mdp.transition @ V
        V_new = Q.max(axis=1)
        if np.max(np.abs(V_new - V)) <= tol:
            return Q
        V = V_new
    return mdp.reward + mdp.discount * mdp.transition @ V


def epsilon_greedy_matrix(q_star: np.ndarray, eps: float) -> np.ndarray:
    S, A = q_star.shape
    probs = np.full((S, A), eps / A)
    probs[np.arange(S), q_star.argmax(axis=1)] += 1.0 - eps
    return probs


def detour_behavior_matrix(n: int) -> np.ndarray:
    """Hand-set data policy for the detour chain: drifts right, rarely dwells at the end."""
    probs = np.zeros((n, 3))
    probs[:] = [0.25, 0.30, 0.45]
    probs[0] = [0.10, 0.45, 0.45]
    probs[n - 1] = [0.55, 0.35, 0.10]
    return probs


def behavior_matrix(mdp: TabularMDP, tier: str, detour: bool = False) -> np.ndarray:
    """Data-policy menu mirroring the usual dataset tiers at desk scale."""
    if detour:
        return detour_behavior_matrix(mdp.n_states)
    if tier == "random":
        return np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)
    if tier in ("medium", "expert"):
        eps = 0.3 if tier == "medium" else 0.05
        return epsilon_greedy_matrix(value_iteration(mdp), eps)
    raise ValueError(f"unknown behavior tier {tier!r}")


ENV_HORIZONS = {"chain": 100, "gridworld": 100, "detour-chain": 60, "pointmass": 60}


def make_env(name: str, gamma: float = 0.99, horizon: int | None = None):
    """Instantiate an in-repo environment by id."""
    if name == "chain":
        mdp = chain_mdp(gamma=gamma)
    elif name == "gridworld":
        mdp = gridworld_mdp(gamma=gamma)
    elif name == "detour-chain":
        mdp = detour_chain_mdp(gamma=gamma)
    elif name == "pointmass":
        return PointMassEnv(horizon=horizon or ENV_HORIZONS["pointmass"])
    else:
        raise ValueError(f"unknown environment {name!r}")
    return TabularEnv(mdp, horizon or ENV_HORIZONS[name], name=name)
