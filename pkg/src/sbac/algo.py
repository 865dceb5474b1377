"""Phase-two policy optimization and the end-to-end two-phase trainer.

The actor maximizes, over dataset states,
    w(s) * Q_mu(s, a_pi) + alpha * log mu(a_pi|s),     a_pi ~ pi(.|s),
where w comes from the ratio model (batch-normalized to mean one and treated
as a constant inside each policy step; the ratio net is refreshed by its own
MMD step in alternation). Discrete tasks take the exact expectation over the
finite action set instead of sampling. Ablation 1 pins w to 1; ablation 2
additionally replaces Q_mu by a critic bootstrapped from the learned policy's
own actions, the configuration whose value estimates the stability analysis
expects to misbehave.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .data import Batch, TransitionDataset, rescale_rewards, sample_batch
from .envs import TabularEnv, make_env
from .errors import DivergenceError
from .estimators import QEstimate, TargetCopy, train_phase_one
from .harness import MetricsWriter, RunConfig, RunLock
from .nets import Adam
from .policies import GaussianTanhPolicy, SoftmaxPolicy
from .ratio import KernelSpec, RatioModel, importance_weights, mmd_loss, normalized_ratios, resolve_kernel

__all__ = [
    "policy_loss",
    "soft_regularization_decomposition",
    "ablation_one_loss",
    "ablation_two_loss",
    "train_sbac",
    "evaluate_policy",
    "SbacResult",
]

LOG_FLOOR = 1e-300
GUARD_FACTOR = 1e3
GUARD_FLOOR = 0.1  # phase-2 guards get a floor so tiny initial losses do not trip them


def _log_mu_all_actions(mu_model, states: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(mu_model.probs_for_states(states), LOG_FLOOR))


def _batch_weights(ratio_model, featurize, states, w_override):
    if w_override is not None:
        return np.asarray(w_override, dtype=float)
    if ratio_model is None:
        return np.ones(np.atleast_1d(states).shape[0])
    return normalized_ratios(ratio_model, featurize(states))


def policy_loss(pi, q: QEstimate, mu_model, ratio_model, batch: Batch, alpha: float,
                featurize=None, eps: np.ndarray | None = None, w_override=None):
    """-mean_s [ w(s) Q(s, a_pi) + alpha log mu(a_pi|s) ] and its actor gradient.

    w is detached from the actor parameters. Softmax policies use the exact
    action expectation; squashed-Gaussian policies use one reparameterized
    sample per state (pass eps for a deterministic draw). Returns
    (loss, grad, w).
    """
    w = _batch_weights(ratio_model, featurize, batch.states, w_override)
    if isinstance(pi, SoftmaxPolicy):
        qvals = q.values_all_actions(batch.states)
        log_mu = _log_mu_all_actions(mu_model, batch.states)
        scores = w[:, None] * qvals + alpha * log_mu
        loss, grad = pi.expected_score_grad(batch.states, scores)
        return loss, grad, w
    if eps is None:
        raise ValueError("continuous policy loss needs the reparameterization noise")
    states = np.atleast_2d(batch.states)
    n = states.shape[0]
    actions, backprop = pi.sample_and_param_grad(states, eps)
    q_vals, dq_da = q.value_and_action_grad(states, actions)
    log_mu, dlmu_da = mu_model.log_prob_action_grad(states, actions)
    loss = -float(np.mean(w * q_vals + alpha * log_mu))
    grad_a = -(w[:, None] * dq_da + alpha * dlmu_da) / n
    return loss, backprop(grad_a), w


def ablation_one_loss(pi, q_mu: QEstimate, mu_model, batch: Batch, alpha: float,
                      eps: np.ndarray | None = None):
    """The actor objective with the visitation weight pinned to 1."""
    loss, grad, _ = policy_loss(pi, q_mu, mu_model, None, batch, alpha, eps=eps,
                                w_override=np.ones(np.atleast_1d(batch.states).shape[0]))
    return loss, grad


def ablation_two_loss(pi, q_pi: QEstimate, mu_model, batch: Batch, alpha: float,
                      eps: np.ndarray | None = None):
    """Weight pinned to 1 and the critic evaluates the learned policy itself."""
    loss, grad, _ = policy_loss(pi, q_pi, mu_model, None, batch, alpha, eps=eps,
                                w_override=np.ones(np.atleast_1d(batch.states).shape[0]))
    return loss, grad


def soft_regularization_decomposition(pi, q: QEstimate, mu_model, ratio_model,
                                      batch: Batch, alpha: float, featurize=None,
                                      eps: np.ndarray | None = None, rng=None,
                                      grid_size: int = 100):
    """Split the objective into its value and state-weighted penalty views.

    Returns (mean Q(s, a_pi), mean (1/w(s)) * (-log mu(a_pi|s))) and checks,
    per sampled state, that ranking actions by w*Q + alpha*log(mu) matches
    ranking by Q + (alpha/w)*log(mu): dividing a per-state objective by its
    positive weight w(s) cannot move the argmax.
    """
    w = _batch_weights(ratio_model, featurize, batch.states, None)
    if isinstance(pi, SoftmaxPolicy):
        probs = pi.probs_for_states(batch.states)
        qvals = q.values_all_actions(batch.states)
        log_mu = _log_mu_all_actions(mu_model, batch.states)
        value_term = float(np.mean(np.sum(probs * qvals, axis=1)))
        penalty_term = float(np.mean((1.0 / w) * np.sum(probs * (-log_mu), axis=1)))
        cand_q, cand_lmu = qvals, log_mu
    else:
        if eps is None:
            eps = rng.standard_normal((np.atleast_2d(batch.states).shape[0], pi.action_dim))
        states = np.atleast_2d(batch.states)
        actions, _ = pi.sample_and_param_grad(states, eps)
        q_vals, _ = q.value_and_action_grad(states, actions)
        log_mu = mu_model.log_prob(states, actions)
        value_term = float(np.mean(q_vals))
        penalty_term = float(np.mean((1.0 / w) * (-log_mu)))
        grid_rng = rng if rng is not None else np.random.default_rng(0)
        n = states.shape[0]
        grid = grid_rng.uniform(-0.999, 0.999, size=(grid_size, pi.action_dim))
        cand_q = np.empty((n, grid_size))
        cand_lmu = np.empty((n, grid_size))
        for j in range(grid_size):
            a_j = np.repeat(grid[j][None, :], n, axis=0)
            cand_q[:, j] = q.value(states, a_j)
            cand_lmu[:, j] = mu_model.log_prob(states, a_j)
    weighted = w[:, None] * cand_q + alpha * cand_lmu
    rescaled = cand_q + (alpha / w)[:, None] * cand_lmu
    if np.any(np.argmax(weighted, axis=1) != np.argmax(rescaled, axis=1)):
        raise AssertionError("positive per-state rescaling moved an argmax")
    return value_term, penalty_term


def q_policy_step(q: QEstimate, target_q: TargetCopy, batch: Batch, gamma: float,
                  pi, rng: np.random.Generator) -> float:
    """Critic step bootstrapping from the learned policy's own next actions."""
    if isinstance(pi, SoftmaxPolicy):
        probs = pi.probs_for_states(batch.next_states)
        cdf = np.cumsum(probs, axis=1)
        u = rng.uniform(size=(probs.shape[0], 1))
        ap = (u > cdf).sum(axis=1)
    else:
        ap = pi.sample(np.atleast_2d(batch.next_states), rng)
    y_next = target_q.net.forward(q.featurize(batch.next_states, ap))[:, 0]
    y = batch.rewards + gamma * (1.0 - batch.dones) * y_next
    feats = q.featurize(batch.states, batch.actions)
    out, cache = q.net.forward_cached(feats)
    v = out[:, 0]
    q.max_seen = max(q.max_seen, float(v.max()), float(y_next.max()))
    n = v.shape[0]
    loss = float(np.mean((y - v) ** 2))
    grad, _ = q.net.backward(cache, (2.0 * (v - y) / n)[:, None])
    q.net.set_params(q.opt.step(q.net.get_params(), grad))
    target_q.update(q.net.get_params())
    return loss


def evaluate_policy(env, policy, n_episodes: int, seed: int) -> list[float]:
    """Undiscounted per-episode returns over horizon-capped rollouts."""
    rng = np.random.default_rng(seed)
    returns = []
    for _ in range(n_episodes):
        s = env.reset(rng)
        total = 0.0
        for _ in range(env.horizon):
            a = policy.act(s, rng)
            s, r, done = env.step(s, a, rng)
            total += r
            if done:
                break
        returns.append(total)
    return returns


@dataclass
class SbacResult:
    policy: object
    mu: object
    q: QEstimate
    ratio_model: RatioModel | None
    q_pi: QEstimate | None
    eval_log: list
    report: dict
    config: RunConfig
    run_dir: str | None = None


def _save_checkpoint(path: str, models: dict) -> None:
    with open(path, "w") as fh:
        for name, (kind, net, extra) in models.items():
            fh.write(json.dumps({
                "name": name, "kind": kind, "sizes": net.sizes,
                "params": net.get_params().tolist(), "extra": extra,
            }, sort_keys=True) + "\n")


def load_checkpoint(path: str) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            row = json.loads(line)
            out[row["name"]] = row
    return out


def _eval_seed(config: RunConfig, eval_index: int) -> int:
    return config.seed * 1_000_003 + eval_index


def _guard(initial: float) -> float:
    return GUARD_FACTOR * max(abs(initial), GUARD_FLOOR)


def train_sbac(dataset: TransitionDataset, config: RunConfig, mode: str | None = None,
               out_dir: str | None = None, phase_one=None) -> SbacResult:
    """Run Phase 1 (clone + evaluate) then Phase 2 (ratio/critic + actor).

    phase_one may carry (mu, q) from a previous run with the same seed and
    dataset; the alternation and all sampling is deterministic per seed. On a
    divergence abort the partial result is attached to the raised error.
    """
    mode = mode or config.mode
    env = make_env(config.env, gamma=config.gamma, horizon=config.horizon or None)
    if dataset.metadata.get("r_max", 1.0) > dataset.metadata.get("r_min", 0.0):
        dataset = rescale_rewards(dataset)
    ceiling = 1.0 / (1.0 - config.gamma)

    metrics = MetricsWriter(os.path.join(out_dir, "metrics.csv") if out_dir else None)
    eval_log: list[dict] = []
    report: dict = {"mode": mode, "env": config.env, "seed": config.seed, "aborted": None}
    lock = RunLock(out_dir) if out_dir else None
    if lock:
        lock.__enter__()
        config.save(os.path.join(out_dir, "config.cfg"))

    rng = np.random.default_rng(config.seed)
    try:
        if phase_one is None:
            mu, q = train_phase_one(
                dataset, config, rng=rng, env=env,
                sink=lambda **kw: metrics.write(**kw))
        else:
            mu, q = phase_one
        report["q_mu_max_seen"] = q.max_seen
        report["q_mu_ceiling_exceeded"] = bool(q.max_seen > ceiling)

        discrete = isinstance(env, TabularEnv)
        from .estimators import build_behavior_model

        pi = build_behavior_model(env, config, rng)  # same architecture family as mu_hat
        pi_opt = Adam(pi.net.n_params, lr=config.lr_actor)
        featurize = env.state_coords

        ratio_model = None
        ratio_opt = None
        kernel = None
        q_pi = None
        if mode == "full":
            coord_dim = featurize(dataset.arrays().states[:1]).shape[1]
            hidden = tuple(int(x) for x in config.ratio_hidden.split(",") if x.strip())
            ratio_model = RatioModel(coord_dim, hidden=hidden, clip=config.ratio_clip, rng=rng)
            ratio_opt = Adam(ratio_model.net.n_params, lr=config.lr_ratio)
            kernel = KernelSpec(config.kernel, config.bandwidth or None)
        elif mode == "ablation2":
            from .estimators import build_q
            q_pi = build_q(env, config, rng)

        ratio_guard = None
        policy_guard = None
        qpi_guard = None
        eval_index = 0
        try:
            for t in range(config.phase2_steps):
                step = config.phase1_steps + t
                row: dict = {"step": step}
                if mode == "full":
                    for _ in range(config.ratio_steps_per_iter):
                        batch = sample_batch(dataset, config.batch_size, rng)
                        rho, _ = importance_weights(pi, mu, batch.states, batch.actions,
                                                    config.mu_floor)
                        if kernel.bandwidth is None:
                            kernel = resolve_kernel(kernel, featurize(batch.states))
                            report["kernel_bandwidth"] = kernel.bandwidth
                        m_loss, m_grad, _ = mmd_loss(
                            ratio_model, rho, featurize(batch.states),
                            featurize(batch.next_states), featurize(batch.start_states),
                            config.gamma, kernel)
                        if ratio_guard is None:
                            ratio_guard = _guard(m_loss)
                        if abs(m_loss) > ratio_guard or not np.isfinite(m_loss):
                            raise DivergenceError(f"mmd loss diverged at step {step}: {m_loss}",
                                                  loss_name="mmd_loss", step=step, value=m_loss)
                        ratio_model.net.set_params(
                            ratio_opt.step(ratio_model.net.get_params(), m_grad))
                        row["mmd_loss"] = m_loss
                elif mode == "ablation2":
                    batch = sample_batch(dataset, config.batch_size, rng)
                    qpi_loss = q_policy_step(q_pi, q_pi.target, batch, config.gamma, pi, rng)
                    if qpi_guard is None:
                        qpi_guard = _guard(qpi_loss)
                    if qpi_loss > qpi_guard or not np.isfinite(qpi_loss):
                        raise DivergenceError(f"policy-critic loss diverged at step {step}: {qpi_loss}",
                                              loss_name="q_pi_loss", step=step, value=qpi_loss)
                    row["fqe_loss"] = qpi_loss

                batch = sample_batch(dataset, config.batch_size, rng)
                eps = None
                if not discrete:
                    eps = rng.standard_normal((batch.states.shape[0], env.action_dim))
                critic = q_pi if mode == "ablation2" else q
                p_loss, p_grad, _ = policy_loss(
                    pi, critic, mu, ratio_model if mode == "full" else None, batch,
                    config.alpha, featurize=featurize, eps=eps)
                if policy_guard is None:
                    policy_guard = _guard(p_loss)
                if abs(p_loss) > policy_guard or not np.isfinite(p_loss):
                    raise DivergenceError(f"policy loss diverged at step {step}: {p_loss}",
                                          loss_name="policy_loss", step=step, value=p_loss)
                pi.net.set_params(pi_opt.step(pi.net.get_params(), p_grad))
                row["policy_loss"] = p_loss

                if (t + 1) % config.eval_every == 0 or t == config.phase2_steps - 1:
                    seed_k = _eval_seed(config, eval_index)
                    returns = evaluate_policy(env, pi, config.eval_episodes, seed_k)
                    eval_log.append({"step": step, "seed": seed_k, "returns": returns})
                    eval_index += 1
                    row["eval_return_mean"] = float(np.mean(returns))
                    row["eval_return_min"] = float(np.min(returns))
                metrics.write(**row)
        except DivergenceError as exc:
            report["aborted"] = {"loss": exc.loss_name, "step": exc.step, "value": exc.value}
            _finalize(report, q, q_pi, ceiling, eval_log, pi, mu, ratio_model, env,
                      config, out_dir, metrics)
            exc.result = SbacResult(pi, mu, q, ratio_model, q_pi, eval_log, report, config, out_dir)
            raise

        _finalize(report, q, q_pi, ceiling, eval_log, pi, mu, ratio_model, env,
                  config, out_dir, metrics)
        return SbacResult(pi, mu, q, ratio_model, q_pi, eval_log, report, config, out_dir)
    finally:
        metrics.close()
        if lock:
            lock.__exit__(None, None, None)


def _finalize(report, q, q_pi, ceiling, eval_log, pi, mu, ratio_model, env,
              config, out_dir, metrics) -> None:
    report["q_mu_max_seen"] = q.max_seen
    report["q_mu_ceiling_exceeded"] = bool(q.max_seen > ceiling)
    if q_pi is not None:
        report["q_pi_max_seen"] = q_pi.max_seen
        report["q_pi_ceiling_exceeded"] = bool(q_pi.max_seen > ceiling)
    if eval_log:
        report["final_eval_mean"] = float(np.mean(eval_log[-1]["returns"]))
        report["final_eval_min"] = float(np.min(eval_log[-1]["returns"]))
    if isinstance(env, TabularEnv) and isinstance(pi, SoftmaxPolicy):
        from .oracle import exact_return
        report["oracle_return"] = exact_return(env.mdp, pi.as_matrix())
    if out_dir:
        models = {"pi": (_kind(pi), pi.net, _extra(pi)), "mu": (_kind(mu), mu.net, _extra(mu)),
                  "q": ("q", q.net, {"mode": q.mode, "n_states": q.n_states,
                                     "n_actions": q.n_actions, "state_dim": q.state_dim,
                                     "action_dim": q.action_dim})}
        if ratio_model is not None:
            models["ratio"] = ("ratio", ratio_model.net, {"clip": ratio_model.clip})
        if q_pi is not None:
            models["q_pi"] = ("q", q_pi.net, {"mode": q_pi.mode, "n_states": q_pi.n_states,
                                              "n_actions": q_pi.n_actions, "state_dim": q_pi.state_dim,
                                              "action_dim": q_pi.action_dim})
        _save_checkpoint(os.path.join(out_dir, "final.ckpt"), models)
        with open(os.path.join(out_dir, "evals.jsonl"), "w") as fh:
            for entry in eval_log:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)


def _kind(model) -> str:
    return "softmax" if isinstance(model, SoftmaxPolicy) else "gaussian_tanh"


def _extra(model) -> dict:
    if isinstance(model, SoftmaxPolicy):
        return {"n_states": model.n_states, "n_actions": model.n_actions}
    return {"state_dim": model.state_dim, "action_dim": model.action_dim}


def policy_from_checkpoint(row: dict):
    """Rebuild a policy object from one checkpoint line."""
    sizes = row["sizes"]
    if row["kind"] == "softmax":
        pol = SoftmaxPolicy(row["extra"]["n_states"], row["extra"]["n_actions"],
                            hidden=tuple(sizes[1:-1]))
    else:
        pol = GaussianTanhPolicy(row["extra"]["state_dim"], row["extra"]["action_dim"],
                                 hidden=tuple(sizes[1:-1]))
    pol.net.set_params(np.asarray(row["params"], dtype=float))
    return pol
