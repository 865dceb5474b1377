import numpy as np
import pytest

from sbac import envs, oracle
from sbac.data import Batch, generate_dataset, sample_batch
from sbac.envs import one_hot
from sbac.nets import grad_rel_err, numerical_grad
from sbac.policies import TabularPolicy
from sbac.ratio import (KernelSpec, RatioModel, importance_weights, kernel_matrix,
                        median_bandwidth, mmd_loss, normalized_ratios, resolve_kernel)


class TestKernels:
    def test_identical_point_unity(self):
        x = np.array([[0.3, -0.2]])
        for fam in ("gaussian", "laplacian"):
            K = kernel_matrix(x, x, KernelSpec(fam, 1.0))
            assert np.allclose(K, [[1.0]])

    def test_gaussian_analytic_value(self):
        # |x - y| = sigma  =>  exp(-1/2)
        sigma = 0.7
        K = kernel_matrix(np.array([[0.0]]), np.array([[sigma]]), KernelSpec("gaussian", sigma))
        assert abs(K[0, 0] - np.exp(-0.5)) < 1e-12

    def test_laplacian_analytic_value(self):
        K = kernel_matrix(np.array([[0.0]]), np.array([[0.5]]), KernelSpec("laplacian", 0.5))
        assert abs(K[0, 0] - np.exp(-1.0)) < 1e-12

    def test_psd_random_sets(self):
        rng = np.random.default_rng(0)
        for seed in range(20):
            pts = np.random.default_rng(seed).uniform(-1, 1, size=(50, int(rng.integers(1, 5))))
            for fam in ("gaussian", "laplacian"):
                K = kernel_matrix(pts, pts, KernelSpec(fam, 0.5))
                assert np.linalg.eigvalsh(K).min() >= -1e-10

    def test_bad_bandwidth_rejected(self):
        with pytest.raises(ValueError):
            KernelSpec("gaussian", -1.0)
        with pytest.raises(ValueError):
            KernelSpec("cauchy", 1.0)

    def test_median_heuristic_resolution(self):
        pts = np.array([[0.0], [1.0], [3.0]])
        bw = median_bandwidth(pts)
        assert bw == 2.0  # distances {1, 2, 3}
        spec = resolve_kernel(KernelSpec("gaussian", None), pts)
        assert spec.bandwidth == 2.0
        assert resolve_kernel(KernelSpec("gaussian", 0.4), pts).bandwidth == 0.4


class TestRatioModel:
    def test_clip_bounds_respected(self):
        model = RatioModel(3, hidden=(8,), rng=np.random.default_rng(0))
        model.net.set_params(np.full(model.net.n_params, 10.0))
        w = model.w(np.random.default_rng(1).standard_normal((20, 3)))
        assert np.all(w <= np.exp(2.0)) and np.all(w >= np.exp(-2.0))

    def test_normalized_ratios_mean_one(self):
        model = RatioModel(2, rng=np.random.default_rng(2))
        feats = np.random.default_rng(3).standard_normal((16, 2))
        out = normalized_ratios(model, feats)
        assert abs(out.mean() - 1.0) < 1e-15

    def test_normalized_constant_input(self):
        model = RatioModel(1, hidden=(), rng=np.random.default_rng(4))
        feats = np.ones((5, 1))
        assert np.allclose(normalized_ratios(model, feats), 1.0)

    def test_normalized_two_values(self):
        class Fixed:
            def w(self, feats):
                return np.array([1.0, 3.0])

        assert np.allclose(normalized_ratios(Fixed(), None), [0.5, 1.5])


class TestImportanceWeights:
    def test_tabular_exact(self):
        pi = TabularPolicy(np.array([[0.9, 0.1]]))
        mu = TabularPolicy(np.array([[0.5, 0.5]]))
        rho, n = importance_weights(pi, mu, np.array([0, 0]), np.array([0, 1]))
        assert np.allclose(rho, [1.8, 0.2]) and n == 0

    def test_floor_applied_and_counted(self):
        pi = TabularPolicy(np.array([[0.9, 0.1]]))
        mu = TabularPolicy(np.array([[1.0 - 1e-6, 1e-6]]))
        rho, n = importance_weights(pi, mu, np.array([0]), np.array([1]), floor=1e-4)
        assert n == 1 and abs(rho[0] - 0.1 / 1e-4) < 1e-9


def hand_batch():
    # two transitions and two start states in 1-D, all weights explicit
    states = np.array([[0.0], [0.5]])
    next_states = np.array([[0.2], [0.9]])
    starts = np.array([[0.1], [0.3]])
    return states, next_states, starts


class TestMmdLoss:
    def test_single_point_zero_exactly(self):
        # all states identical, pi = mu, w = 1: every term cancels
        model = RatioModel(1, hidden=(), rng=np.random.default_rng(0))
        model.net.set_params(np.zeros(model.net.n_params))  # raw = 0 -> w = 1
        x = np.zeros((4, 1))
        rho = np.ones(4)
        for pairing in ("u", "v"):
            loss, grad, _ = mmd_loss(model, rho, x, x, x, 0.9, KernelSpec("gaussian", 1.0),
                                     pairing=pairing, anchor=0.0)
            assert abs(loss) < 1e-15
            assert np.max(np.abs(grad)) < 1e-12

    def test_hand_expansion_two_transitions(self):
        # independent scalar expansion of the quadratic form, gamma = 0.5
        gamma, bw = 0.5, 0.8
        s, sp, s0 = hand_batch()
        model = RatioModel(1, hidden=(), rng=np.random.default_rng(1))
        rho = np.array([1.0, 1.0])
        w_s = model.w(s)
        w_sp = model.w(sp)
        d = gamma * rho * w_s - w_sp
        k = lambda a, b: np.exp(-((a - b) ** 2) / (2 * bw**2))
        n, m = 2, 2
        omg = 1.0 - gamma
        # u-statistic: off-diagonal quad + cross + start-start off-diagonal
        quad = (d[0] * d[1] * k(0.2, 0.9) + d[1] * d[0] * k(0.9, 0.2)) / (n * (n - 1))
        cross = 2 * omg * (d[0] * (k(0.2, 0.1) + k(0.2, 0.3))
                           + d[1] * (k(0.9, 0.1) + k(0.9, 0.3))) / (n * m)
        const = omg**2 * (k(0.1, 0.3) + k(0.3, 0.1)) / (m * (m - 1))
        expected_u = quad + cross + const
        loss_u, _, _ = mmd_loss(model, rho, s, sp, s0, gamma, KernelSpec("gaussian", bw),
                                pairing="u", anchor=0.0)
        assert abs(loss_u - expected_u) < 1e-12
        # v-statistic keeps the diagonals
        quad_v = sum(d[i] * d[j] * k(sp[i, 0], sp[j, 0]) for i in range(2) for j in range(2)) / n**2
        const_v = sum(k(s0[i, 0], s0[j, 0]) for i in range(2) for j in range(2)) * omg**2 / m**2
        expected_v = quad_v + cross + const_v
        loss_v, _, _ = mmd_loss(model, rho, s, sp, s0, gamma, KernelSpec("gaussian", bw),
                                pairing="v", anchor=0.0)
        assert abs(loss_v - expected_v) < 1e-12

    def test_v_statistic_nonnegative_arbitrary_inputs(self):
        rng = np.random.default_rng(7)
        for trial in range(50):
            dim = int(rng.integers(1, 4))
            model = RatioModel(dim, hidden=(8,), rng=np.random.default_rng(trial))
            model.net.set_params(rng.standard_normal(model.net.n_params))
            n = int(rng.integers(2, 12))
            m = int(rng.integers(1, 6))
            s = rng.standard_normal((n, dim))
            sp = rng.standard_normal((n, dim))
            s0 = rng.standard_normal((m, dim))
            rho = rng.uniform(0.0, 5.0, n)
            gamma = float(rng.uniform(0.1, 0.99))
            fam = "gaussian" if trial % 2 == 0 else "laplacian"
            loss, _, _ = mmd_loss(model, rho, s, sp, s0, gamma,
                                  KernelSpec(fam, float(rng.uniform(0.2, 2.0))),
                                  pairing="v", anchor=0.0)
            assert loss >= -1e-9

    @pytest.mark.parametrize("pairing", ["u", "v"])
    @pytest.mark.parametrize("anchor", [0.0, 1.0])
    def test_gradient_matches_fd(self, pairing, anchor):
        rng = np.random.default_rng(11)
        model = RatioModel(2, hidden=(6,), rng=rng)
        n, m = 6, 3
        s = rng.standard_normal((n, 2))
        sp = rng.standard_normal((n, 2))
        s0 = rng.standard_normal((m, 2))
        rho = rng.uniform(0.2, 3.0, n)
        spec = KernelSpec("gaussian", 0.7)

        def f(params):
            model.net.set_params(params)
            loss, _, _ = mmd_loss(model, rho, s, sp, s0, 0.9, spec, pairing=pairing, anchor=anchor)
            return loss

        p0 = model.net.get_params()
        _, g, _ = mmd_loss(model, rho, s, sp, s0, 0.9, spec, pairing=pairing, anchor=anchor)
        fd = numerical_grad(f, p0)
        model.net.set_params(p0)
        assert grad_rel_err(g, fd) < 1e-3


class TestFixedPointOrdering:
    def test_exact_ratio_beats_scaled_perturbations(self):
        # at a mild horizon the minibatch loss mean separates the oracle ratio
        # from globally rescaled copies of it (the anchor sharpens this)
        gamma = 0.5
        env = envs.make_env("gridworld", gamma=gamma)
        mdp = env.mdp
        pi = TabularPolicy(envs.behavior_matrix(mdp, "expert"))
        mu = TabularPolicy(envs.behavior_matrix(mdp, "random"))
        ds = generate_dataset(env, "random", 100, seed=0)
        w_star = oracle.exact_ratio(mdp, pi.probs, mu.probs)
        fz = lambda sts: one_hot(sts, 25)
        spec = KernelSpec("gaussian", median_bandwidth(fz(ds.arrays().states[:256])))

        from sbac.nets import Mlp

        class FixedW:
            """Frozen lookup table standing in for a ratio model."""

            def __init__(self, table):
                self.table = table
                self.net = Mlp([25, 1], rng=np.random.default_rng(0))

            def w(self, feats):
                return feats @ self.table

            def w_cached(self, feats):
                _, cache = self.net.forward_cached(feats)
                return feats @ self.table, cache, np.zeros(feats.shape[0])

        losses = {}
        for name, table in [("star", w_star), ("up", w_star * np.exp(0.2)),
                            ("down", w_star * np.exp(-0.2))]:
            model = FixedW(table)
            rng = np.random.default_rng(123)
            vals = []
            for _ in range(200):
                b = sample_batch(ds, 256, rng)
                rho, _ = importance_weights(pi, mu, b.states, b.actions)
                loss, _, _ = mmd_loss(model, rho, fz(b.states), fz(b.next_states),
                                      fz(b.start_states), gamma, spec)
                vals.append(loss)
            losses[name] = float(np.mean(vals))
        assert losses["star"] < losses["up"]
        assert losses["star"] < losses["down"]
