"""Trajectory datasets: the only training input the learners ever see.

Episodes are stored as ordered (s, a, r, s', a', done) tuples. The next action
a' comes from the following step of the same episode; at a horizon truncation
we draw one extra (never executed) action from the data policy so the SARSA
target stays defined. done marks genuine environment terminals only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DataError, DegenerateInputError

__all__ = [
    "Transition",
    "TransitionDataset",
    "Batch",
    "rollout",
    "generate_dataset",
    "rescale_rewards",
    "sample_minibatch",
    "sample_batch",
    "save_jsonl",
    "load_jsonl",
]


@dataclass
class Transition:
    state: object
    action: object
    reward: float
    next_state: object
    next_action: Optional[object]
    done: bool
    episode_id: int
    t: int


@dataclass
class Batch:
    """Stacked minibatch arrays plus resampled episode-start states."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    next_actions: np.ndarray
    dones: np.ndarray
    start_states: np.ndarray


def _stack(values, discrete: bool) -> np.ndarray:
    if discrete:
        return np.asarray(values, dtype=int)
    return np.asarray(values, dtype=float)


class TransitionDataset:
    """Immutable-after-creation list of transitions with dataset-level metadata."""

    def __init__(self, transitions: list[Transition], metadata: dict):
        self.transitions = list(transitions)
        self.metadata = dict(metadata)
        self.metadata["count"] = len(self.transitions)
        self._arrays = None

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def discrete(self) -> bool:
        return len(self.transitions) > 0 and np.isscalar(self.transitions[0].state)

    def arrays(self) -> Batch:
        """Whole-dataset stacked view (start_states are the episode t=0 states)."""
        if self._arrays is None:
            tr = self.transitions
            disc = self.discrete
            filler = tr[0].action
            next_actions = [t.next_action if t.next_action is not None else filler for t in tr]
            self._arrays = Batch(
                states=_stack([t.state for t in tr], disc),
                actions=_stack([t.action for t in tr], disc),
                rewards=np.asarray([t.reward for t in tr], dtype=float),
                next_states=_stack([t.next_state for t in tr], disc),
                next_actions=_stack(next_actions, disc),
                dones=np.asarray([t.done for t in tr], dtype=float),
                start_states=_stack([t.state for t in tr if t.t == 0], disc),
            )
        return self._arrays

    def validate(self) -> None:
        if not self.transitions:
            raise DataError("empty dataset")
        r_min = self.metadata.get("r_min")
        r_max = self.metadata.get("r_max")
        for tr in self.transitions:
            if r_min is not None and tr.reward < r_min - 1e-12:
                raise DataError(f"reward {tr.reward} below declared r_min {r_min}")
            if r_max is not None and tr.reward > r_max + 1e-12:
                raise DataError(f"reward {tr.reward} above declared r_max {r_max}")
            if tr.done and tr.next_action is not None:
                raise DataError("terminal transition carries a next action")
            if not tr.done and tr.next_action is None:
                raise DataError(f"non-terminal transition (ep {tr.episode_id}, t {tr.t}) lacks a next action")
        by_ep: dict[int, list[Transition]] = {}
        for tr in self.transitions:
            by_ep.setdefault(tr.episode_id, []).append(tr)
        for ep, steps in by_ep.items():
            for prev, cur in zip(steps, steps[1:]):
                if cur.t != prev.t + 1:
                    raise DataError(f"episode {ep}: time index jumps at t={prev.t}")
                if not np.array_equal(np.asarray(prev.next_state), np.asarray(cur.state)):
                    raise DataError(f"episode {ep}: next_state chain broken at t={prev.t}")
                if not np.array_equal(np.asarray(prev.next_action), np.asarray(cur.action)):
                    raise DataError(f"episode {ep}: next_action chain broken at t={prev.t}")


def _check_compatible(env, policy) -> None:
    env_discrete = getattr(env, "discrete", False)
    if env_discrete:
        if not hasattr(policy, "n_actions") or policy.n_actions != env.n_actions:
            raise DataError("policy action space does not match environment")
    else:
        if not hasattr(policy, "action_dim") or policy.action_dim != env.action_dim:
            raise DataError("policy action dimension does not match environment")


def rollout(env, policy, n_episodes: int, seed: int, episode_offset: int = 0,
            policy_id: str = "custom") -> TransitionDataset:
    """Generate horizon-capped episodes; deterministic for a fixed seed."""
    _check_compatible(env, policy)
    rng = np.random.default_rng(seed)
    transitions: list[Transition] = []
    for ep in range(n_episodes):
        s = env.reset(rng)
        a = policy.act(s, rng)
        for t in range(env.horizon):
            s_next, r, done = env.step(s, a, rng)
            if done:
                transitions.append(Transition(s, a, r, s_next, None, True, ep + episode_offset, t))
                break
            a_next = policy.act(s_next, rng)
            transitions.append(Transition(s, a, r, s_next, a_next, False, ep + episode_offset, t))
            s, a = s_next, a_next
    rewards = [tr.reward for tr in transitions]
    meta = {
        "env": getattr(env, "name", "custom"),
        "policy": policy_id,
        "r_min": float(min(rewards)),
        "r_max": float(max(rewards)),
        "seed": seed,
    }
    ds = TransitionDataset(transitions, meta)
    ds.validate()
    return ds


def generate_dataset(env, tier: str, n_episodes: int, seed: int) -> TransitionDataset:
    """Dataset menu: random / medium / expert / mixed (50-50 medium+expert)."""
    from .envs import TabularEnv, behavior_matrix
    from .policies import TabularPolicy, pointmass_behavior

    def tier_policy(t: str):
        if isinstance(env, TabularEnv):
            detour = env.name == "detour-chain"
            return TabularPolicy(behavior_matrix(env.mdp, "random" if detour else t, detour=detour))
        return pointmass_behavior(env, t)

    if tier == "mixed":
        half = n_episodes // 2
        d1 = rollout(env, tier_policy("medium"), half, seed, policy_id="medium")
        d2 = rollout(env, tier_policy("expert"), n_episodes - half, seed + 1,
                     episode_offset=half, policy_id="expert")
        merged = d1.transitions + d2.transitions
        rewards = [tr.reward for tr in merged]
        meta = dict(d1.metadata)
        meta.update(policy="mixed", r_min=float(min(rewards)), r_max=float(max(rewards)), seed=seed)
        ds = TransitionDataset(merged, meta)
        ds.validate()
        return ds
    return rollout(env, tier_policy(tier), n_episodes, seed, policy_id=tier)


def rescale_rewards(dataset: TransitionDataset) -> TransitionDataset:
    """Affine map of rewards onto [0, 1]; a no-op when already rescaled."""
    r_min = float(dataset.metadata["r_min"])
    r_max = float(dataset.metadata["r_max"])
    if r_max <= r_min:
        raise DegenerateInputError("constant-reward dataset cannot be rescaled")
    span = r_max - r_min
    out = [
        Transition(t.state, t.action, (t.reward - r_min) / span, t.next_state,
                   t.next_action, t.done, t.episode_id, t.t)
        for t in dataset.transitions
    ]
    meta = dict(dataset.metadata)
    meta.setdefault("orig_r_min", r_min)
    meta.setdefault("orig_r_max", r_max)
    meta["r_min"] = 0.0
    meta["r_max"] = 1.0
    return TransitionDataset(out, meta)


def sample_minibatch(dataset: TransitionDataset, batch_size: int, rng: np.random.Generator) -> list[Transition]:
    """Uniform-with-replacement transition sample; reproducible given rng state."""
    n = len(dataset)
    if n == 0:
        raise DataError("cannot sample from an empty dataset")
    idx = rng.integers(0, n, size=batch_size)
    return [dataset.transitions[i] for i in idx]


def sample_batch(dataset: TransitionDataset, batch_size: int, rng: np.random.Generator) -> Batch:
    """Stacked-array sibling of sample_minibatch, plus resampled episode starts."""
    n = len(dataset)
    if n == 0:
        raise DataError("cannot sample from an empty dataset")
    arr = dataset.arrays()
    idx = rng.integers(0, n, size=batch_size)
    starts = arr.start_states
    sidx = rng.integers(0, starts.shape[0], size=batch_size)
    return Batch(
        states=arr.states[idx],
        actions=arr.actions[idx],
        rewards=arr.rewards[idx],
        next_states=arr.next_states[idx],
        next_actions=arr.next_actions[idx],
        dones=arr.dones[idx],
        start_states=starts[sidx],
    )


# ---------------------------------------------------------------------------
# JSON-lines persistence: one header line, then one transition per line.
# ---------------------------------------------------------------------------

def _to_json(v):
    if v is None:
        return None
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    return v


def save_jsonl(dataset: TransitionDataset, path: str) -> None:
    with open(path, "w") as f:
        f.write(json.dumps(dataset.metadata, sort_keys=True) + "\n")
        for t in dataset.transitions:
            row = {
                "ep": t.episode_id,
                "t": t.t,
                "s": _to_json(t.state),
                "a": _to_json(t.action),
                "r": t.reward,
                "sp": _to_json(t.next_state),
                "ap": _to_json(t.next_action),
                "done": t.done,
            }
            f.write(json.dumps(row, sort_keys=True) + "\n")


def _from_json(v):
    if isinstance(v, list):
        return np.asarray(v, dtype=float)
    return v


def load_jsonl(path: str) -> TransitionDataset:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise DataError(f"empty dataset file {path}")
    meta = json.loads(lines[0])
    transitions = []
    for line in lines[1:]:
        row = json.loads(line)
        transitions.append(
            Transition(
                state=_from_json(row["s"]),
                action=_from_json(row["a"]),
                reward=float(row["r"]),
                next_state=_from_json(row["sp"]),
                next_action=_from_json(row["ap"]) if row["ap"] is not None else None,
                done=bool(row["done"]),
                episode_id=int(row["ep"]),
                t=int(row["t"]),
            )
        )
    ds = TransitionDataset(transitions, meta)
    ds.validate()
    return ds
