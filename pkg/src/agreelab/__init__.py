"""Agreement protocols, common-prior construction and bounded-agent simulation."""
from .core import (
    BeliefDistribution,
    KnowledgePartition,
    Objective,
    StateSpace,
    TaskSpec,
    TypeProfile,
)
from .protocol import ChannelSpec, CommGraph, RunConfig, run_agreement, run_task
from .prior_lp import brute_force_common_prior, construct_common_prior, size_condition_holds

__version__ = "0.1.0"

__all__ = [
    "BeliefDistribution",
    "ChannelSpec",
    "CommGraph",
    "KnowledgePartition",
    "Objective",
    "RunConfig",
    "StateSpace",
    "TaskSpec",
    "TypeProfile",
    "brute_force_common_prior",
    "construct_common_prior",
    "run_agreement",
    "run_task",
    "size_condition_holds",
]
