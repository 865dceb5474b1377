"""Command-line entry points.

Exit codes: 0 success, 2 config error (argparse uses 2 as well), 3 data error,
4 divergence abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import algo, data, envs, harness, oracle
from .errors import ConfigError, DataError, DivergenceError
from .policies import TabularPolicy

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def _load_config(args) -> harness.RunConfig:
    cfg = harness.RunConfig.load(args.config) if args.config else harness.RunConfig()
    overrides = list(args.set or [])
    for name in ("mode", "dataset", "env", "seed"):
        v = getattr(args, name, None)
        if v is not None:
            overrides.append(f"{name}={v}")
    return cfg.with_overrides(overrides)


def cmd_gen_data(args) -> int:
    env = envs.make_env(args.env, gamma=args.gamma, horizon=args.horizon or None)
    ds = data.generate_dataset(env, args.policy, args.episodes, args.seed)
    data.save_jsonl(ds, args.out)
    print(json.dumps({"out": args.out, "transitions": len(ds), "env": args.env,
                      "policy": args.policy, "r_min": ds.metadata["r_min"],
                      "r_max": ds.metadata["r_max"]}))
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if not cfg.dataset:
        raise ConfigError("train needs a dataset path (config key 'dataset' or --dataset)")
    if not os.path.exists(cfg.dataset):
        raise DataError(f"dataset file not found: {cfg.dataset}")
    ds = data.load_jsonl(cfg.dataset)
    os.makedirs(args.out, exist_ok=True)
    result = algo.train_sbac(ds, cfg, out_dir=args.out)
    print(json.dumps({"run_dir": args.out, "report": result.report}, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    cfg = harness.RunConfig.load(os.path.join(args.run, "config.cfg"))
    ckpt = algo.load_checkpoint(os.path.join(args.run, "final.ckpt"))
    pi = algo.policy_from_checkpoint(ckpt["pi"])
    env = envs.make_env(cfg.env, gamma=cfg.gamma, horizon=cfg.horizon or None)
    evals_path = os.path.join(args.run, "evals.jsonl")
    if args.seed is not None:
        seed, episodes = args.seed, args.episodes or cfg.eval_episodes
    else:
        if not os.path.exists(evals_path):
            raise DataError(f"no evaluation log in {args.run}")
        with open(evals_path) as fh:
            last = json.loads(fh.read().splitlines()[-1])
        seed, episodes = last["seed"], len(last["returns"])
    returns = algo.evaluate_policy(env, pi, episodes, seed)
    print(json.dumps({"seed": seed, "returns": returns,
                      "mean": float(np.mean(returns)), "min": float(np.min(returns))}))
    return 0


def cmd_oracle(args) -> int:
    env = envs.make_env(args.env, gamma=args.gamma)
    mdp = env.mdp
    detour = args.env == "detour-chain"
    pi = envs.behavior_matrix(mdp, args.pi, detour=detour and args.pi == "data")
    mu = envs.behavior_matrix(mdp, args.mu, detour=detour and args.mu == "data")
    out: dict = {"env": args.env, "op": args.op, "pi": args.pi, "mu": args.mu, "gamma": args.gamma}
    if args.op == "visitation":
        out["d_pi"] = oracle.exact_visitation(mdp, pi).d.tolist()
    elif args.op == "qvalues":
        tables = oracle.exact_q_mu(mdp, mu)
        out.update(Q=tables.Q.tolist(), V=tables.V.tolist(), A=tables.A.tolist())
    elif args.op == "return":
        out["J_pi"] = oracle.exact_return(mdp, pi)
        out["J_mu"] = oracle.exact_return(mdp, mu)
    elif args.op == "perf-diff":
        lhs, rhs = oracle.performance_difference_check(mdp, pi, mu)
        out.update(lhs=lhs, rhs=rhs, gap=abs(lhs - rhs))
    elif args.op == "is-diff":
        out["value"] = oracle.importance_sampled_difference(mdp, pi, mu)
    elif args.op == "ratio":
        w = oracle.exact_ratio(mdp, pi, mu)
        out["w"] = w.tolist()
        out["fixed_point_gap"] = float(
            np.max(np.abs(oracle.apply_backward_flow_exact(mdp, pi, mu, w) - w)))
    elif args.op == "surrogate":
        rep = oracle.surrogate_bound(mdp, pi, mu)
        out.update(delta_exact=rep.delta_exact, surrogate_lower=rep.surrogate_lower,
                   eps_mu=rep.eps_mu, tv_per_state=rep.tv_per_state.tolist())
    else:
        raise ConfigError(f"unknown oracle op {args.op!r}")
    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_ratio(args) -> int:
    cfg = _load_config(args)
    ds = data.load_jsonl(cfg.dataset)
    env = envs.make_env(cfg.env, gamma=cfg.gamma, horizon=cfg.horizon or None)
    mdp = env.mdp
    detour = cfg.env == "detour-chain"
    pi = TabularPolicy(envs.behavior_matrix(mdp, args.pi, detour=detour and args.pi == "data"))
    mu = TabularPolicy(envs.behavior_matrix(mdp, args.mu, detour=detour and args.mu == "data"))
    from .ratio import KernelSpec, RatioModel, train_ratio

    rng = np.random.default_rng(cfg.seed)
    coords_dim = env.state_coords(np.arange(1)).shape[1]
    hidden = tuple(int(x) for x in cfg.ratio_hidden.split(",") if x.strip())
    model = RatioModel(coords_dim, hidden=hidden, clip=cfg.ratio_clip, rng=rng)
    train_ratio(model, pi, mu, ds, env.state_coords, steps=cfg.phase2_steps,
                batch_size=cfg.batch_size, lr=cfg.lr_ratio, gamma=cfg.gamma,
                kernel=KernelSpec(cfg.kernel, cfg.bandwidth or None), rng=rng,
                mu_floor=cfg.mu_floor)
    states = np.arange(env.n_states)
    w = model.w(env.state_coords(states))
    with open(args.out, "w") as fh:
        fh.write("state,w\n")
        for s, ws in zip(states, w):
            fh.write(f"{s},{ws!r}\n")
    print(json.dumps({"out": args.out, "mean_w": float(np.mean(w))}))
    return 0


def cmd_score(args) -> int:
    try:
        score = harness.normalized_score(args.raw, args.random, args.expert)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    print(json.dumps({"score": score}))
    return 0


def cmd_stability(args) -> int:
    path = os.path.join(args.run, "evals.jsonl")
    if not os.path.exists(path):
        raise DataError(f"no evaluation log at {path}")
    with open(path) as fh:
        evals = [json.loads(line) for line in fh.read().splitlines() if line]
    rep = harness.stability_metrics(evals)
    print(json.dumps({"worst_episode_pct": rep.worst_episode_pct,
                      "worst_eval_pct": rep.worst_eval_pct,
                      "evals_used": rep.evals_used, "truncated": rep.truncated}))
    return 0


def cmd_plot(args) -> int:
    fields = [f.strip() for f in args.fields.split(",") if f.strip()]
    harness.emit_plot(args.csv, fields, args.out)
    print(json.dumps({"out": args.out, "fields": fields, "seeds": len(args.csv)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sbac", description="Offline RL toolkit with exact tabular oracles")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="generate an offline dataset")
    g.add_argument("--env", required=True)
    g.add_argument("--policy", required=True, choices=["random", "medium", "expert", "mixed", "data"])
    g.add_argument("--episodes", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--gamma", type=float, default=0.99)
    g.add_argument("--horizon", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run two-phase training")
    t.add_argument("--config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE")
    t.add_argument("--mode", choices=["full", "ablation1", "ablation2"])
    t.add_argument("--dataset")
    t.add_argument("--env")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="replay evaluation episodes from a checkpoint")
    e.add_argument("--run", required=True)
    e.add_argument("--seed", type=int)
    e.add_argument("--episodes", type=int)
    e.set_defaults(func=cmd_evaluate)

    o = sub.add_parser("oracle", help="exact tabular computations as JSON")
    o.add_argument("--env", required=True)
    o.add_argument("--op", required=True)
    o.add_argument("--pi", default="expert")
    o.add_argument("--mu", default="random")
    o.add_argument("--gamma", type=float, default=0.99)
    o.set_defaults(func=cmd_oracle)

    r = sub.add_parser("ratio", help="estimate visitation ratios over dataset states")
    r.add_argument("--config")
    r.add_argument("--set", action="append", metavar="KEY=VALUE")
    r.add_argument("--dataset")
    r.add_argument("--env")
    r.add_argument("--seed", type=int)
    r.add_argument("--pi", default="expert")
    r.add_argument("--mu", default="random")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_ratio)

    s = sub.add_parser("score", help="normalized score between references")
    s.add_argument("--raw", type=float, required=True)
    s.add_argument("--random", type=float, required=True)
    s.add_argument("--expert", type=float, required=True)
    s.set_defaults(func=cmd_score)

    st = sub.add_parser("stability", help="worst-case evaluation spread of a run")
    st.add_argument("--run", required=True)
    st.set_defaults(func=cmd_stability)

    pl = sub.add_parser("plot", help="SVG learning curves from metrics CSVs")
    pl.add_argument("--csv", action="append", required=True)
    pl.add_argument("--fields", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence abort: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
