import numpy as np
import pytest

from sbac import envs
from sbac.data import (Transition, TransitionDataset, generate_dataset, load_jsonl,
                       rescale_rewards, rollout, sample_batch, sample_minibatch, save_jsonl)
from sbac.errors import DataError, DegenerateInputError
from sbac.policies import TabularPolicy, ZeroPolicy


def uniform_policy(n_states, n_actions):
    return TabularPolicy(np.full((n_states, n_actions), 1.0 / n_actions))


def test_two_state_chain_rollout_chains():
    mdp = envs.chain_mdp(n=2, slip=0.0)
    env = envs.TabularEnv(mdp, horizon=3, name="chain")
    ds = rollout(env, uniform_policy(2, 2), 1, seed=0)
    assert len(ds) == 3
    ds.validate()
    for prev, cur in zip(ds.transitions, ds.transitions[1:]):
        assert prev.next_state == cur.state
        assert prev.next_action == cur.action


def test_zero_policy_at_rest_point():
    env = envs.PointMassEnv(noise_std=0.0, start=(0.0, 0.0), start_spread=0.0)
    ds = rollout(env, ZeroPolicy(), 1, seed=0)
    for t in ds.transitions:
        assert np.allclose(t.state, 0.0)
        assert np.allclose(t.next_state, 0.0)


def test_rollout_dimension_mismatch_rejected():
    env = envs.make_env("gridworld")
    with pytest.raises(DataError):
        rollout(env, uniform_policy(25, 3), 1, seed=0)  # env has 4 actions


def test_rollout_deterministic():
    env = envs.make_env("gridworld")
    pol = uniform_policy(25, 4)
    d1 = rollout(env, pol, 3, seed=42)
    d2 = rollout(env, pol, 3, seed=42)
    assert [(t.state, t.action, t.reward) for t in d1.transitions] == \
           [(t.state, t.action, t.reward) for t in d2.transitions]


def test_empirical_frequencies_match_visitation():
    # 200 expert episodes on the gridworld: undiscounted empirical state
    # frequencies track the oracle's discounted visitation closely because the
    # task is continuing, fast mixing, and restarts from the initial
    # distribution.
    from sbac import oracle

    env = envs.make_env("gridworld", gamma=0.99)
    ds = generate_dataset(env, "expert", 200, seed=0)
    arr = ds.arrays()
    emp = np.bincount(arr.states, minlength=25) / len(ds)
    d_mu = oracle.exact_visitation(env.mdp, envs.behavior_matrix(env.mdp, "expert")).d
    assert 0.5 * np.abs(emp - d_mu).sum() < 0.02


class TestRescale:
    def make_ds(self, rewards):
        trs = [Transition(0, 0, r, 0, 0, False, 0, i) for i, r in enumerate(rewards)]
        # single fake episode; chaining holds because all states/actions are 0
        return TransitionDataset(trs, {"env": "x", "policy": "y",
                                       "r_min": min(rewards), "r_max": max(rewards), "seed": 0})

    def test_affine_map(self):
        ds = rescale_rewards(self.make_ds([-1.0, 0.0, 1.0]))
        assert [t.reward for t in ds.transitions] == [0.0, 0.5, 1.0]
        assert ds.metadata["orig_r_min"] == -1.0 and ds.metadata["orig_r_max"] == 1.0

    def test_identity_when_already_rescaled(self):
        ds = rescale_rewards(self.make_ds([0.0, 1.0, 1.0]))
        assert [t.reward for t in ds.transitions] == [0.0, 1.0, 1.0]
        again = rescale_rewards(ds)
        assert [t.reward for t in again.transitions] == [0.0, 1.0, 1.0]

    def test_monotone_order_preserved(self):
        env = envs.make_env("gridworld")
        ds = generate_dataset(env, "medium", 5, seed=1)
        before = np.array([t.reward for t in ds.transitions])
        after = np.array([t.reward for t in rescale_rewards(ds).transitions])
        assert after.min() == 0.0 and after.max() == 1.0
        assert np.array_equal(np.argsort(before, kind="stable"), np.argsort(after, kind="stable"))

    def test_constant_rewards_rejected(self):
        with pytest.raises(DegenerateInputError):
            rescale_rewards(self.make_ds([0.5, 0.5]))


class TestSampling:
    def test_single_element_dataset(self):
        tr = Transition(1, 2, 0.5, 3, 4, False, 0, 0)
        ds = TransitionDataset([tr], {"r_min": 0.5, "r_max": 0.5})
        batch = sample_minibatch(ds, 4, np.random.default_rng(0))
        assert len(batch) == 4 and all(b is tr for b in batch)

    def test_deterministic_given_seed(self):
        env = envs.make_env("chain")
        ds = generate_dataset(env, "random", 20, seed=0)
        b1 = sample_minibatch(ds, 64, np.random.default_rng(9))
        b2 = sample_minibatch(ds, 64, np.random.default_rng(9))
        assert [id(t) for t in b1] == [id(t) for t in b2]

    def test_empty_dataset_errors(self):
        ds = TransitionDataset([], {})
        with pytest.raises(DataError):
            sample_minibatch(ds, 1, np.random.default_rng(0))

    def test_uniformity_within_binomial_bound(self):
        # aggregated over 10k draws, each index count stays within 3 sigma of
        # its binomial expectation
        env = envs.make_env("chain", horizon=10)
        ds = generate_dataset(env, "random", 10, seed=0)
        n = len(ds)
        draws, batch = 10_000, 256
        rng = np.random.default_rng(17)
        total = np.zeros(n)
        positions = {id(t): i for i, t in enumerate(ds.transitions)}
        for d in range(draws):
            if d < 50:  # exercise the real API on a subset, array-sample the rest
                for t in sample_minibatch(ds, batch, rng):
                    total[positions[id(t)]] += 1
            else:
                total += np.bincount(rng.integers(0, n, size=batch), minlength=n)
        p = 1.0 / n
        expected = draws * batch * p
        sigma = np.sqrt(draws * batch * p * (1 - p))
        assert np.all(np.abs(total - expected) <= 3.5 * sigma)

    def test_sample_batch_arrays_match_minibatch(self):
        env = envs.make_env("chain")
        ds = generate_dataset(env, "random", 10, seed=0)
        b_list = sample_minibatch(ds, 32, np.random.default_rng(5))
        b_arr = sample_batch(ds, 32, np.random.default_rng(5))
        assert np.array_equal(b_arr.states, np.array([t.state for t in b_list]))
        assert np.array_equal(b_arr.rewards, np.array([t.reward for t in b_list]))


class TestJsonl:
    def test_roundtrip_bitwise(self, tmp_path):
        env = envs.make_env("gridworld")
        ds = generate_dataset(env, "mixed", 6, seed=3)
        path = tmp_path / "d.jsonl"
        save_jsonl(ds, str(path))
        back = load_jsonl(str(path))
        assert len(back) == len(ds)
        assert back.metadata["r_min"] == ds.metadata["r_min"]
        for a, b in zip(ds.transitions, back.transitions):
            assert a.reward == b.reward  # bitwise float equality via repr round-trip
            assert a.state == b.state and a.action == b.action
            assert a.done == b.done and a.episode_id == b.episode_id and a.t == b.t

    def test_roundtrip_continuous(self, tmp_path):
        env = envs.PointMassEnv()
        from sbac.policies import pointmass_behavior

        ds = rollout(env, pointmass_behavior(env, "medium"), 2, seed=1)
        path = tmp_path / "c.jsonl"
        save_jsonl(ds, str(path))
        back = load_jsonl(str(path))
        for a, b in zip(ds.transitions, back.transitions):
            assert np.array_equal(np.asarray(a.state), b.state)
            assert np.array_equal(np.asarray(a.action), b.action)
            assert a.reward == b.reward

    def test_chain_invariant_survives_roundtrip_and_rescale(self, tmp_path):
        env = envs.make_env("chain")
        ds = generate_dataset(env, "medium", 4, seed=2)
        ds = rescale_rewards(ds)
        path = tmp_path / "r.jsonl"
        save_jsonl(ds, str(path))
        load_jsonl(str(path)).validate()


def test_terminal_transition_handling():
    mdp = envs.chain_mdp(n=3, slip=0.0)
    env = envs.TabularEnv(mdp, horizon=10, name="chain", terminal_states=frozenset({2}))
    pol = TabularPolicy(np.tile([0.0, 1.0], (3, 1)))  # always right
    ds = rollout(env, pol, 1, seed=0)
    last = ds.transitions[-1]
    assert last.done and last.next_action is None and last.next_state == 2
    ds.validate()
