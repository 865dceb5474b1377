"""Exact tabular computations used as ground truth for every learned quantity.

All solvers are dense direct linear solves (MDPs here stay far below 10^3
states), so the results are exact up to float64 round-off and serve as the
reference side of every dual-route check in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envs import TabularMDP
from .errors import SupportError

__all__ = [
    "VisitationVector",
    "ValueTables",
    "SurrogateBoundReport",
    "exact_visitation",
    "exact_q_mu",
    "exact_return",
    "performance_difference_check",
    "importance_sampled_difference",
    "exact_ratio",
    "apply_backward_flow_exact",
    "surrogate_bound",
    "population_mmd",
]

_ZERO = 1e-12


def _probs(policy) -> np.ndarray:
    return policy.probs if hasattr(policy, "probs") else np.asarray(policy, dtype=float)


def _policy_chain(mdp: TabularMDP, pi: np.ndarray) -> np.ndarray:
    """State-to-state chain P_pi[s, s'] = sum_a pi(a|s) P[s, a, s']."""
    return np.einsum("sa,sap->sp", pi, mdp.transition)


@dataclass
class VisitationVector:
    """Discounted state visitation d(s) = (1-gamma) sum_t gamma^t P(s_t = s)."""

    d: np.ndarray

    def __post_init__(self):
        if np.any(self.d < -1e-10) or abs(self.d.sum() - 1.0) > 1e-10:
            raise ValueError("visitation must be a probability vector within 1e-10")


@dataclass
class ValueTables:
    Q: np.ndarray
    V: np.ndarray
    A: np.ndarray


@dataclass
class SurrogateBoundReport:
    delta_exact: float
    surrogate_lower: float
    eps_mu: float
    tv_per_state: np.ndarray


def exact_visitation(mdp: TabularMDP, policy) -> VisitationVector:
    """Solve the occupancy flow equation directly.

    The visitation satisfies d = (1-gamma) rho + gamma P_pi^T d, i.e.
    (I - gamma P_pi^T) d = (1-gamma) rho, which is nonsingular for gamma < 1.
    """
    pi = _probs(policy)
    P_pi = _policy_chain(mdp, pi)
    g = mdp.discount
    d = np.linalg.solve(np.eye(mdp.n_states) - g * P_pi.T, (1.0 - g) * mdp.initial_dist)
    d = np.maximum(d, 0.0)
    d = d / d.sum()
    return VisitationVector(d)


def exact_q_mu(mdp: TabularMDP, mu) -> ValueTables:
    """Policy evaluation over the joint state-action space.

    Q solves (I - gamma P M) q = r with P the (SA x S) transition block and
    M[s', (s',a')] = mu(a'|s'); V and A follow from the mu-weighted rows.
    """
    mu_p = _probs(mu)
    S, A = mdp.n_states, mdp.n_actions
    P = mdp.transition.reshape(S * A, S)
    M = np.zeros((S, S * A))
    for s in range(S):
        M[s, s * A : (s + 1) * A] = mu_p[s]
    lhs = np.eye(S * A) - mdp.discount * P @ M
    q = np.linalg.solve(lhs, mdp.reward.ravel())
    Q = q.reshape(S, A)
    V = np.sum(mu_p * Q, axis=1)
    return ValueTables(Q=Q, V=V, A=Q - V[:, None])


def exact_return(mdp: TabularMDP, policy) -> float:
    """J(pi) = sum_{s,a} d_pi(s) pi(a|s) r(s,a) / (1-gamma)."""
    pi = _probs(policy)
    d = exact_visitation(mdp, pi).d
    return float(np.sum(d[:, None] * pi * mdp.reward) / (1.0 - mdp.discount))


def performance_difference_check(mdp: TabularMDP, pi, mu):
    """Both sides of the performance-difference identity.

    lhs = J(pi) - J(mu);
    rhs = (1/(1-gamma)) sum_s d_pi(s) sum_a pi(a|s) A_mu(s, a).
    """
    pi_p, mu_p = _probs(pi), _probs(mu)
    lhs = exact_return(mdp, pi_p) - exact_return(mdp, mu_p)
    d_pi = exact_visitation(mdp, pi_p).d
    adv = exact_q_mu(mdp, mu_p).A
    rhs = float(np.sum(d_pi[:, None] * pi_p * adv) / (1.0 - mdp.discount))
    return lhs, rhs


def _support_check(d_pi: np.ndarray, d_mu: np.ndarray) -> None:
    bad = np.flatnonzero((d_mu <= _ZERO) & (d_pi > 1e-10))
    if bad.size:
        raise SupportError(f"target policy visits states with zero behavior mass: {bad.tolist()}", bad)


def importance_sampled_difference(mdp: TabularMDP, pi, mu) -> float:
    """Performance difference rewritten over the behavior visitation.

    (1/(1-gamma)) sum_s d_mu(s) w(s) sum_a pi(a|s) A_mu(s,a), w = d_pi/d_mu.
    """
    pi_p, mu_p = _probs(pi), _probs(mu)
    d_pi = exact_visitation(mdp, pi_p).d
    d_mu = exact_visitation(mdp, mu_p).d
    _support_check(d_pi, d_mu)
    adv = exact_q_mu(mdp, mu_p).A
    g = np.sum(pi_p * adv, axis=1)
    mask = d_mu > _ZERO
    w = np.zeros_like(d_mu)
    w[mask] = d_pi[mask] / d_mu[mask]
    return float(np.sum(d_mu * w * g) / (1.0 - mdp.discount))


def exact_ratio(mdp: TabularMDP, pi, mu) -> np.ndarray:
    """Visitation ratio w(s) = d_pi(s) / d_mu(s); errors list zero-mass states."""
    d_pi = exact_visitation(mdp, _probs(pi)).d
    d_mu = exact_visitation(mdp, _probs(mu)).d
    zero = np.flatnonzero(d_mu <= _ZERO)
    if zero.size:
        raise SupportError(f"behavior visitation vanishes on states {zero.tolist()}", zero)
    return d_pi / d_mu


def apply_backward_flow_exact(mdp: TabularMDP, pi, mu, w: np.ndarray) -> np.ndarray:
    """One application of the time-reversed flow operator, exactly.

    Bayes inversion of the behavior chain at stationarity gives, per state s',
        T w(s') = [ (1-gamma) rho(s')
                    + gamma sum_{s,a} d_mu(s) mu(a|s) P(s'|s,a) (pi/mu)(a|s) w(s) ] / d_mu(s'),
    where the (1-gamma) rho term is the initial-injection event of the reset
    chain. The mu factors cancel against the importance ratio wherever the
    support condition holds, which is checked explicitly.
    """
    pi_p, mu_p = _probs(pi), _probs(mu)
    w = np.asarray(w, dtype=float)
    d_mu = exact_visitation(mdp, mu_p).d
    no_inflow = np.flatnonzero(d_mu <= _ZERO)
    if no_inflow.size:
        raise SupportError(f"states with zero behavior inflow: {no_inflow.tolist()}", no_inflow)
    bad = (pi_p > _ZERO) & (mu_p <= _ZERO) & (d_mu[:, None] > _ZERO)
    if np.any(bad):
        s_bad = sorted(set(np.nonzero(bad)[0].tolist()))
        raise SupportError(f"pi acts outside mu's action support at states {s_bad}", s_bad)
    g = mdp.discount
    flow = _policy_chain(mdp, pi_p).T @ (d_mu * w)
    return ((1.0 - g) * mdp.initial_dist + g * flow) / d_mu


def surrogate_bound(mdp: TabularMDP, pi, mu) -> SurrogateBoundReport:
    """Trust-region style lower bound on the performance difference.

    surrogate = (1/(1-gamma)) E_{d_mu} [ E_pi[A_mu] - (2 gamma eps/(1-gamma)) TV(pi||mu) ]
    with eps = max_s |E_pi[A_mu(s, .)]|. Holds as a lower bound on the exact
    difference; typically loose once the policies separate.
    """
    pi_p, mu_p = _probs(pi), _probs(mu)
    g = mdp.discount
    adv = exact_q_mu(mdp, mu_p).A
    gains = np.sum(pi_p * adv, axis=1)
    eps_mu = float(np.max(np.abs(gains)))
    tv = 0.5 * np.sum(np.abs(pi_p - mu_p), axis=1)
    d_mu = exact_visitation(mdp, mu_p).d
    penalty = 2.0 * g * eps_mu / (1.0 - g)
    surrogate = float(np.sum(d_mu * (gains - penalty * tv)) / (1.0 - g))
    delta = exact_return(mdp, pi_p) - exact_return(mdp, mu_p)
    return SurrogateBoundReport(delta_exact=delta, surrogate_lower=surrogate,
                                eps_mu=eps_mu, tv_per_state=tv)


def population_mmd(mdp: TabularMDP, pi, mu, w: np.ndarray, kernel: np.ndarray) -> float:
    """Population discrepancy between w and its backward-flow image.

    Compares the signed measure d_mu*w against its exact one-step flow image
    (1-gamma) rho + gamma P_pi^T (d_mu*w) under the kernel quadratic form.
    Zero exactly at the visitation ratio, positive elsewhere for a strictly
    positive-definite kernel.
    """
    pi_p, mu_p = _probs(pi), _probs(mu)
    w = np.asarray(w, dtype=float)
    d_mu = exact_visitation(mdp, mu_p).d
    g = mdp.discount
    a_side = d_mu * w
    b_side = (1.0 - g) * mdp.initial_dist + g * _policy_chain(mdp, pi_p).T @ (d_mu * w)
    nu = a_side - b_side
    return float(nu @ np.asarray(kernel, dtype=float) @ nu)
