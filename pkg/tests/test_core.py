from __future__ import annotations

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agreelab.core import (
    BeliefDistribution,
    KnowledgePartition,
    Objective,
    StateSpace,
    TaskSpec,
    TypeProfile,
    conditional_expectation,
    join_partitions,
    max_prior_distance,
    meet_partitions,
    observed_cell,
    posterior_tv_distance,
    prior_distance,
    refine_by_function,
    refine_partition,
    to_fraction,
)
from agreelab.errors import (
    DimensionMismatch,
    InconsistentObservation,
    InvalidDistribution,
    InvalidPartition,
    ZeroMassCell,
)


@st.composite
def distributions(draw, size=None, allow_zero=True):
    D = draw(st.integers(1, 6)) if size is None else size
    lo = 0 if allow_zero else 1
    w = draw(st.lists(st.integers(lo, 9), min_size=D, max_size=D).filter(lambda x: sum(x) > 0))
    return BeliefDistribution.from_weights(w)


@st.composite
def partitions(draw, size):
    labels = draw(st.lists(st.integers(0, size - 1), min_size=size, max_size=size))
    return KnowledgePartition.from_labels(labels)


@st.composite
def partition_families(draw):
    D = draw(st.integers(1, 7))
    k = draw(st.integers(1, 4))
    return [draw(partitions(D)) for _ in range(k)]


def test_float_inputs_become_exact_decimals():
    assert to_fraction(0.1) == Fraction(1, 10)
    assert to_fraction(np.int64(3)) / 7 == Fraction(3, 7)
    assert to_fraction(np.float64(0.25)) == Fraction(1, 4)
    assert hash(BeliefDistribution.from_weights(np.array([1, 2]))) is not None
    assert BeliefDistribution((0.2, 0.3, 0.5)).mass == (Fraction(1, 5), Fraction(3, 10), Fraction(1, 2))


def test_distribution_validation():
    with pytest.raises(InvalidDistribution):
        BeliefDistribution((Fraction(1, 2), Fraction(1, 3)))
    with pytest.raises(InvalidDistribution):
        BeliefDistribution((Fraction(3, 2), Fraction(-1, 2)))
    with pytest.raises(InvalidDistribution):
        BeliefDistribution.from_weights([0, 0])


def test_state_space_and_objective_checks():
    assert StateSpace(0, 3).labels == ("s0", "s1", "s2")
    with pytest.raises(ValueError):
        StateSpace(0, 2, ("a", "a"))
    with pytest.raises(ValueError):
        Objective((Fraction(3, 2),))


def test_task_spec_defaults_to_trivial_partitions():
    task = TaskSpec(StateSpace(0, 3), Objective((0, 1, 0)), (BeliefDistribution.uniform(3),) * 2, 0.1, 0.2)
    assert task.n_agents == 2
    assert all(len(p) == 1 for p in task.partitions)
    with pytest.raises(ValueError):
        TaskSpec(StateSpace(0, 3), Objective((0, 1, 0)), (BeliefDistribution.uniform(3),), 1, 0.2)
    with pytest.raises(DimensionMismatch):
        TaskSpec(StateSpace(0, 3), Objective((0, 1)), (BeliefDistribution.uniform(3),), 0.1, 0.2)


def test_partition_validation_and_canonical_form():
    p = KnowledgePartition(((2, 1), (0,)))
    assert p.cells == ((0,), (1, 2))
    assert p == KnowledgePartition.from_labels(["x", "y", "y"])
    with pytest.raises(InvalidPartition):
        KnowledgePartition(((0, 1), (1, 2)))
    with pytest.raises(InvalidPartition):
        KnowledgePartition(((0,), (2,)), 3)


def test_conditional_expectation_examples():
    assert conditional_expectation(BeliefDistribution.uniform(2), Objective((1, 0)), (0, 1)) == Fraction(1, 2)
    p = BeliefDistribution((0.2, 0.3, 0.5))
    assert conditional_expectation(p, Objective((1, 0, 0.5)), (0, 2)) == Fraction(9, 14)
    assert conditional_expectation(p, Objective((0.25,) * 3), (1, 2)) == Fraction(1, 4)
    with pytest.raises(ZeroMassCell):
        conditional_expectation(BeliefDistribution((1, 0, 0)), Objective((0, 1, 1)), (1, 2))


@given(distributions(allow_zero=False), st.data())
def test_conditional_expectation_full_space_and_singletons(p, data):
    D = len(p)
    f = Objective(tuple(Fraction(v, 8) for v in data.draw(st.lists(st.integers(0, 8), min_size=D, max_size=D))))
    full = conditional_expectation(p, f, range(D))
    assert full == sum(f[s] * p[s] for s in range(D))
    s = data.draw(st.integers(0, D - 1))
    assert conditional_expectation(p, f, (s,)) == f[s]
    cell = data.draw(st.lists(st.integers(0, D - 1), min_size=1, unique=True))
    v = conditional_expectation(p, f, cell)
    assert min(f[s] for s in cell) <= v <= max(f[s] for s in cell)


def test_prior_distance_examples():
    p = BeliefDistribution((Fraction(1, 3), Fraction(2, 3)))
    assert prior_distance(p, p) == 0
    assert prior_distance(BeliefDistribution.point(2, 0), BeliefDistribution.point(2, 1)) == 2
    assert posterior_tv_distance(BeliefDistribution.point(2, 0), BeliefDistribution.point(2, 1)) == 1
    with pytest.raises(DimensionMismatch):
        prior_distance(p, BeliefDistribution.uniform(3))


@given(st.integers(1, 6).flatmap(lambda D: st.tuples(*(distributions(D) for _ in range(3)))))
def test_prior_distance_is_a_metric(triple):
    p, q, r = triple
    assert prior_distance(p, q) == prior_distance(q, p)
    assert prior_distance(p, r) <= prior_distance(p, q) + prior_distance(q, r)
    assert (prior_distance(p, q) == 0) == (p == q)
    assert 0 <= posterior_tv_distance(p, q) <= 1
    assert max_prior_distance([p, q, r]) >= prior_distance(p, r)


def test_refine_partition_examples():
    receiver = KnowledgePartition(((0, 1), (2,)))
    sender = KnowledgePartition(((0,), (1, 2)))
    values = {(0,): "x", (1, 2): "y"}
    refined = refine_partition(receiver, sender, values, observed_message="y")
    assert refined.refines(receiver)
    assert observed_cell(refined, (0, 1), sender, values, "y") == (1,)
    assert refined.cell_of(1) == (1,)
    # uninformative message
    assert refine_partition(receiver, sender, {(0,): "x", (1, 2): "x"}) == receiver
    # fully revealing message
    singles = KnowledgePartition.discrete(3)
    assert refine_partition(receiver, singles, {(s,): s for s in range(3)}) == singles
    with pytest.raises(InconsistentObservation):
        refine_partition(receiver, sender, values, observed_message="z")
    with pytest.raises(InconsistentObservation):
        observed_cell(refined, (2,), sender, values, "x")


@given(st.integers(1, 7).flatmap(lambda D: st.tuples(partitions(D), partitions(D), st.lists(st.integers(0, 2), min_size=D, max_size=D))))
def test_refinement_output_refines_input(args):
    mine, sender, raw = args
    values = {c: raw[c[0]] for c in sender.cells}
    out = refine_partition(mine, sender, values)
    assert out.refines(mine)
    assert out.refines(sender) or len({values[c] for c in sender.cells}) < len(sender)
    assert refine_by_function(mine, raw).refines(mine)


def test_join_and_meet_examples():
    a = KnowledgePartition(((0, 1), (2,)))
    b = KnowledgePartition(((0,), (1, 2)))
    assert join_partitions([a]) == a
    assert join_partitions([a, a]) == a
    assert join_partitions([a, b]) == KnowledgePartition.discrete(3)
    assert meet_partitions([a, a]) == a
    assert meet_partitions([a, b]) == KnowledgePartition.trivial(3)
    singles = KnowledgePartition.discrete(4)
    assert meet_partitions([singles, singles]) == singles


@given(partition_families(), st.randoms(use_true_random=False))
def test_join_meet_lattice_properties(parts, rnd):
    join, meet = join_partitions(parts), meet_partitions(parts)
    for p in parts:
        assert join.refines(p)
        assert p.refines(meet)
    shuffled = parts[:]
    rnd.shuffle(shuffled)
    assert join_partitions(shuffled) == join
    assert meet_partitions(shuffled) == meet
    assert join_partitions([join, join]) == join
    assert meet_partitions([meet, meet]) == meet


@settings(max_examples=50)
@given(distributions(allow_zero=True), st.data())
def test_condition_is_supported_on_the_cell(p, data):
    D = len(p)
    part = data.draw(partitions(D))
    profile = TypeProfile.from_priors([part], [p])
    for cell, post in profile.posteriors[0].items():
        assert sum(post.mass) == 1
        assert set(post.support()) <= set(cell)
    # exact arithmetic: repeating the operation is identical
    assert TypeProfile.from_priors([part], [p]) == profile
