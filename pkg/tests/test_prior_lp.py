from __future__ import annotations

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agreelab.core import BeliefDistribution, KnowledgePartition, TypeProfile
from agreelab.errors import InstanceTooLarge, MalformedPosterior
from agreelab.experiments import random_prior, random_profile
from agreelab.prior_lp import (
    brute_force_common_prior,
    construct_common_prior,
    ratio_constraints,
    size_condition_holds,
    verify_common_prior,
)


def _labels(size):
    return st.lists(st.integers(0, size - 1), min_size=size, max_size=size).map(KnowledgePartition.from_labels)


@st.composite
def small_instances(draw, max_states=5, max_agents=3):
    D = draw(st.integers(1, max_states))
    N = draw(st.integers(1, max_agents))
    parts = [draw(_labels(D)) for _ in range(N)]
    seed = draw(st.integers(0, 2**32 - 1))
    profile = random_profile(np.random.default_rng(seed), parts)
    return parts, profile


def test_single_agent_belief_is_a_common_prior():
    tau = BeliefDistribution.from_weights([1, 2, 3])
    part = KnowledgePartition.trivial(3)
    res = construct_common_prior([part], TypeProfile.from_priors([part], [tau]))
    assert res.feasible and res.prior == tau


def test_conflicting_point_masses_are_infeasible():
    part = KnowledgePartition.trivial(3)
    profile = TypeProfile(({part.cells[0]: BeliefDistribution.point(3, 0)}, {part.cells[0]: BeliefDistribution.point(3, 1)}))
    res = construct_common_prior([part, part], profile)
    assert not res.feasible and res.witness
    assert not brute_force_common_prior([part, part], profile).feasible


def test_uniform_prior_fits_uniform_posteriors():
    parts = [KnowledgePartition(((0, 1), (2, 3))), KnowledgePartition(((0, 2), (1, 3)))]
    u = BeliefDistribution.uniform(4)
    profile = TypeProfile.from_priors(parts, [u, u])
    assert verify_common_prior(u, parts, profile)
    assert construct_common_prior(parts, profile).prior == u


def test_perturbed_prior_fails_verification():
    rng = np.random.default_rng(7)
    parts = [KnowledgePartition(((0, 1), (2, 3))), KnowledgePartition(((0, 2), (1, 3)))]
    p = random_prior(rng, 4)
    profile = TypeProfile.from_priors(parts, [p, p])
    res = construct_common_prior(parts, profile)
    assert verify_common_prior(res.prior, parts, profile)
    bumped = list(res.prior.mass)
    bumped[0] += Fraction(1, 1000)
    assert not verify_common_prior(BeliefDistribution.from_weights(bumped), parts, profile)


def test_posterior_outside_its_cell_is_rejected():
    part = KnowledgePartition(((0,), (1, 2)))
    profile = TypeProfile(({(1, 2): BeliefDistribution.point(3, 0)},))
    with pytest.raises(MalformedPosterior):
        construct_common_prior([part], profile)


def test_size_condition_examples():
    singles = KnowledgePartition.discrete(2)
    assert size_condition_holds([singles, singles])
    for D in range(2, 6):
        triv = KnowledgePartition.trivial(D)
        assert not size_condition_holds([triv, triv])
    assert size_condition_holds([KnowledgePartition(((0, 1), (2,)))])


def test_oracle_rejects_large_instances():
    part = KnowledgePartition.trivial(7)
    with pytest.raises(InstanceTooLarge):
        brute_force_common_prior([part], TypeProfile.from_priors([part], [BeliefDistribution.uniform(7)]))


@settings(max_examples=300, deadline=None)
@given(small_instances())
def test_constructor_matches_the_oracle_and_is_sound(instance):
    parts, profile = instance
    res = construct_common_prior(parts, profile)
    assert res.feasible == brute_force_common_prior(parts, profile).feasible
    if res.feasible:
        assert sum(res.prior.mass) == 1
        assert verify_common_prior(res.prior, parts, profile)
        for c in ratio_constraints(parts, profile):
            assert c.residual(res.prior.mass) == 0


@settings(max_examples=100, deadline=None)
@given(small_instances(max_states=6, max_agents=3))
def test_constraint_count_is_at_most_quadratic(instance):
    parts, profile = instance
    D, N = parts[0].size, len(parts)
    assert len(ratio_constraints(parts, profile)) <= N * D * D
    assert construct_common_prior(parts, profile).constraint_count <= N * D * D


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6).flatmap(lambda D: st.lists(_labels(D), min_size=1, max_size=4)), st.integers(0, 2**32 - 1))
def test_priors_round_trip_through_their_posteriors(parts, seed):
    p = random_prior(np.random.default_rng(seed), parts[0].size)
    profile = TypeProfile.from_priors(parts, [p] * len(parts))
    res = construct_common_prior(parts, profile)
    assert res.feasible
    for post in profile.posteriors:
        for cell, dist in post.items():
            assert res.prior.condition(cell) == dist


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6).flatmap(lambda D: st.lists(_labels(D), min_size=1, max_size=3)), st.integers(0, 2**32 - 1))
def test_size_condition_guarantees_a_common_prior(parts, seed):
    if not size_condition_holds(parts):
        return
    profile = random_profile(np.random.default_rng(seed), parts, zero_rate=0.0)
    assert construct_common_prior(parts, profile).feasible


def test_intersection_scope_is_weaker_than_cell_scope():
    parts = [KnowledgePartition(((0, 1, 2, 3),)), KnowledgePartition(((0, 1), (2, 3)))]
    profile = TypeProfile((
        {(0, 1, 2, 3): BeliefDistribution.from_weights([1, 1, 1, 1])},
        {(0, 1): BeliefDistribution.from_weights([1, 1, 0, 0]), (2, 3): BeliefDistribution.from_weights([0, 0, 1, 1])},
    ))
    cell = construct_common_prior(parts, profile)
    inter = construct_common_prior(parts, profile, scope="intersection")
    assert cell.feasible and inter.feasible
    assert len(ratio_constraints(parts, profile, "intersection")) <= len(ratio_constraints(parts, profile))


def test_tolerance_accepts_nearly_consistent_posteriors():
    part = KnowledgePartition.trivial(2)
    profile = TypeProfile((
        {(0, 1): BeliefDistribution((Fraction(1, 2), Fraction(1, 2)))},
        {(0, 1): BeliefDistribution((Fraction(51, 100), Fraction(49, 100)))},
    ))
    assert not construct_common_prior([part, part], profile).feasible
    assert construct_common_prior([part, part], profile, tolerance=Fraction(1, 50)).feasible
