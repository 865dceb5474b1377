"""Offline RL toolkit: visitation-ratio weighted behavior regularization with
exact tabular oracles for every learned quantity."""

__version__ = "0.1.0"

from .envs import TabularMDP, make_env
from .data import Transition, TransitionDataset, rollout, rescale_rewards, sample_minibatch
from .harness import RunConfig

__all__ = [
    "TabularMDP",
    "make_env",
    "Transition",
    "TransitionDataset",
    "rollout",
    "rescale_rewards",
    "sample_minibatch",
    "RunConfig",
    "__version__",
]
