"""Exact Bayesian machinery over finite state spaces.

States are integer indices ``0..D-1``. Every probability and objective value is
a :class:`fractions.Fraction`, so conditioning, refinement and distance
computations are exact and replay bit-identically.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    InconsistentObservation,
    InvalidDistribution,
    InvalidPartition,
    ZeroMassCell,
)

Cell = tuple[int, ...]


def to_fraction(value) -> Fraction:
    """Convert ints, strings, Fractions and floats to a Fraction.

    Floats go through their shortest decimal repr, so ``0.1`` becomes ``1/10``.
    """
    if isinstance(value, Fraction):
        return value
    if isinstance(value, (float, np.floating)):
        return Fraction(repr(float(value)))
    if isinstance(value, np.integer):
        return Fraction(int(value))
    return Fraction(value)


@dataclass(frozen=True)
class StateSpace:
    task_id: int
    size: int
    labels: tuple = ()

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("state space must contain at least one state")
        if not self.labels:
            object.__setattr__(self, "labels", tuple(f"s{i}" for i in range(self.size)))
        if len(self.labels) != self.size or len(set(self.labels)) != self.size:
            raise ValueError("labels must be unique and match the size")

    @property
    def states(self) -> range:
        return range(self.size)


@dataclass(frozen=True)
class Objective:
    values: tuple[Fraction, ...]

    def __post_init__(self):
        vals = tuple(to_fraction(v) for v in self.values)
        if any(v < 0 or v > 1 for v in vals):
            raise ValueError("objective values must lie in [0, 1]")
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, s: int) -> Fraction:
        return self.values[s]


@dataclass(frozen=True)
class BeliefDistribution:
    mass: tuple[Fraction, ...]

    def __post_init__(self):
        m = tuple(to_fraction(v) for v in self.mass)
        if not m:
            raise InvalidDistribution("empty distribution")
        if any(v < 0 for v in m):
            raise InvalidDistribution("negative mass")
        if sum(m) != 1:
            raise InvalidDistribution(f"masses sum to {sum(m)}, not 1")
        object.__setattr__(self, "mass", m)

    @classmethod
    def from_weights(cls, weights: Iterable) -> "BeliefDistribution":
        w = [to_fraction(v) for v in weights]
        total = sum(w)
        if total <= 0:
            raise InvalidDistribution("weights must have positive total")
        return cls(tuple(v / total for v in w))

    @classmethod
    def uniform(cls, size: int) -> "BeliefDistribution":
        return cls(tuple(Fraction(1, size) for _ in range(size)))

    @classmethod
    def point(cls, size: int, state: int) -> "BeliefDistribution":
        return cls(tuple(Fraction(int(s == state)) for s in range(size)))

    def __len__(self) -> int:
        return len(self.mass)

    def __getitem__(self, s: int) -> Fraction:
        return self.mass[s]

    def cell_mass(self, cell: Iterable[int]) -> Fraction:
        return sum((self.mass[s] for s in cell), Fraction(0))

    def condition(self, cell: Iterable[int]) -> "BeliefDistribution":
        """Return the prior conditioned on ``cell`` (a full-length vector)."""
        cell = set(cell)
        total = self.cell_mass(cell)
        if total == 0:
            raise ZeroMassCell(f"cell {sorted(cell)} has zero prior mass")
        return BeliefDistribution(
            tuple(self.mass[s] / total if s in cell else Fraction(0) for s in range(len(self)))
        )

    def support(self) -> tuple[int, ...]:
        return tuple(s for s, v in enumerate(self.mass) if v > 0)


@dataclass(frozen=True)
class KnowledgePartition:
    """A partition of ``range(size)`` with cells sorted by least state."""

    cells: tuple[Cell, ...]
    size: int = field(default=-1)

    def __post_init__(self):
        cells = tuple(tuple(sorted(set(c))) for c in self.cells)
        if any(len(c) == 0 for c in cells):
            raise InvalidPartition("cells must be non-empty")
        cells = tuple(sorted(cells, key=lambda c: c[0]))
        flat = [s for c in cells for s in c]
        size = self.size if self.size >= 0 else len(flat)
        if len(flat) != len(set(flat)):
            raise InvalidPartition("cells overlap")
        if sorted(flat) != list(range(size)):
            raise InvalidPartition("cells do not cover the state space exactly")
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "size", size)
        lookup = [0] * size
        for k, c in enumerate(cells):
            for s in c:
                lookup[s] = k
        object.__setattr__(self, "_lookup", tuple(lookup))

    @classmethod
    def trivial(cls, size: int) -> "KnowledgePartition":
        return cls((tuple(range(size)),), size)

    @classmethod
    def discrete(cls, size: int) -> "KnowledgePartition":
        return cls(tuple((s,) for s in range(size)), size)

    @classmethod
    def from_labels(cls, labels: Sequence) -> "KnowledgePartition":
        """Group states with equal labels into one cell."""
        groups: dict = {}
        for s, lab in enumerate(labels):
            groups.setdefault(lab, []).append(s)
        return cls(tuple(tuple(g) for g in groups.values()), len(labels))

    def __len__(self) -> int:
        return len(self.cells)

    def cell_index(self, s: int) -> int:
        return self._lookup[s]

    def cell_of(self, s: int) -> Cell:
        return self.cells[self._lookup[s]]

    def labels(self) -> tuple[int, ...]:
        return self._lookup

    def refines(self, other: "KnowledgePartition") -> bool:
        """True when every cell of ``self`` lies inside one cell of ``other``."""
        _check_same_space([self, other])
        return all(len({other.cell_index(s) for s in c}) == 1 for c in self.cells)


@dataclass(frozen=True)
class TaskSpec:
    space: StateSpace
    objective: Objective
    priors: tuple[BeliefDistribution, ...]
    epsilon: Fraction
    delta: Fraction
    partitions: tuple[KnowledgePartition, ...] | None = None

    def __post_init__(self):
        eps, dlt = to_fraction(self.epsilon), to_fraction(self.delta)
        if not (0 < eps < 1 and 0 < dlt < 1):
            raise ValueError("epsilon and delta must lie strictly inside (0, 1)")
        object.__setattr__(self, "epsilon", eps)
        object.__setattr__(self, "delta", dlt)
        object.__setattr__(self, "priors", tuple(self.priors))
        if not self.priors:
            raise ValueError("at least one prior is required")
        D = self.space.size
        if len(self.objective) != D or any(len(p) != D for p in self.priors):
            raise DimensionMismatch("objective and priors must match the state space")
        if self.partitions is None:
            parts = tuple(KnowledgePartition.trivial(D) for _ in self.priors)
        else:
            parts = tuple(self.partitions)
        if len(parts) != len(self.priors) or any(p.size != D for p in parts):
            raise DimensionMismatch("one partition per agent over the task's states")
        object.__setattr__(self, "partitions", parts)

    @property
    def n_agents(self) -> int:
        return len(self.priors)

    @property
    def size(self) -> int:
        return self.space.size


@dataclass(frozen=True)
class TypeProfile:
    """Per-agent posteriors keyed by cell.

    ``posteriors[i][cell]`` is a full-length distribution supported on ``cell``.
    Cells absent from an agent's map carry no constraint (zero own-prior mass).
    """

    posteriors: tuple[Mapping[Cell, BeliefDistribution], ...]

    @classmethod
    def from_priors(
        cls,
        partitions: Sequence[KnowledgePartition],
        priors: Sequence[BeliefDistribution],
    ) -> "TypeProfile":
        out = []
        for part, prior in zip(partitions, priors):
            out.append(
                {c: prior.condition(c) for c in part.cells if prior.cell_mass(c) > 0}
            )
        return cls(tuple(out))

    def __len__(self) -> int:
        return len(self.posteriors)


def _check_same_space(parts: Sequence[KnowledgePartition]) -> int:
    sizes = {p.size for p in parts}
    if len(sizes) != 1:
        raise DimensionMismatch("partitions cover different state spaces")
    return sizes.pop()


def conditional_expectation(
    prior: BeliefDistribution, objective: Objective, cell: Iterable[int]
) -> Fraction:
    """E_P[f | cell] computed exactly."""
    cell = tuple(cell)
    if not cell:
        raise ValueError("cell must be non-empty")
    mass = sum((prior[s] for s in cell), Fraction(0))
    if mass == 0:
        raise ZeroMassCell(f"cell {cell} has zero prior mass")
    return sum((objective[s] * prior[s] for s in cell), Fraction(0)) / mass


def weighted_expectation(
    weights: Sequence[Fraction], objective: Objective, cell: Iterable[int]
) -> Fraction:
    """Like :func:`conditional_expectation` but for unnormalized weights."""
    cell = tuple(cell)
    mass = sum((weights[s] for s in cell), Fraction(0))
    if mass == 0:
        raise ZeroMassCell(f"cell {cell} has zero weight")
    return sum((objective[s] * weights[s] for s in cell), Fraction(0)) / mass


def prior_distance(p: BeliefDistribution, q: BeliefDistribution) -> Fraction:
    """L1 distance between two priors."""
    if len(p) != len(q):
        raise DimensionMismatch("distributions over different state spaces")
    return sum((abs(a - b) for a, b in zip(p.mass, q.mass)), Fraction(0))


def max_prior_distance(priors: Sequence[BeliefDistribution]) -> Fraction:
    """Pairwise maximum L1 distance across a list of agents' priors."""
    best = Fraction(0)
    for i in range(len(priors)):
        for k in range(i + 1, len(priors)):
            best = max(best, prior_distance(priors[i], priors[k]))
    return best


def posterior_tv_distance(p: BeliefDistribution, q: BeliefDistribution) -> Fraction:
    """Total-variation distance: half the L1 distance."""
    return prior_distance(p, q) / 2


def refine_by_function(
    mine: KnowledgePartition, message_at_state: Sequence
) -> KnowledgePartition:
    """Split every cell of ``mine`` by the value of a per-state message."""
    labels = tuple((mine.cell_index(s), message_at_state[s]) for s in range(mine.size))
    return KnowledgePartition.from_labels(labels)


def refine_partition(
    mine: KnowledgePartition,
    sender_partition: KnowledgePartition,
    message_value_per_sender_cell: Mapping[Cell, object],
    observed_message=None,
) -> KnowledgePartition:
    """Update a receiver's partition after a message from a known sender.

    Every cell is split according to what the sender would have said at each of
    its states, which keeps the partition common knowledge. When
    ``observed_message`` is given it must be a value some sender cell produces,
    otherwise :class:`InconsistentObservation` is raised; the receiver's cell at
    the true state is then the piece whose message equals the observation.
    """
    _check_same_space([mine, sender_partition])
    missing = [c for c in sender_partition.cells if c not in message_value_per_sender_cell]
    if missing:
        raise ValueError(f"no message value for sender cells {missing}")
    if observed_message is not None and observed_message not in set(
        message_value_per_sender_cell.values()
    ):
        raise InconsistentObservation(f"no sender cell emits {observed_message!r}")
    per_state = [
        message_value_per_sender_cell[sender_partition.cell_of(s)] for s in range(mine.size)
    ]
    return refine_by_function(mine, per_state)


def observed_cell(
    refined: KnowledgePartition,
    old_cell: Cell,
    sender_partition: KnowledgePartition,
    message_value_per_sender_cell: Mapping[Cell, object],
    observed_message,
) -> Cell:
    """States of ``old_cell`` consistent with ``observed_message``."""
    cell = tuple(
        s
        for s in old_cell
        if message_value_per_sender_cell[sender_partition.cell_of(s)] == observed_message
    )
    if not cell:
        raise InconsistentObservation("observation empties the receiver's cell")
    return cell


def join_partitions(parts: Sequence[KnowledgePartition]) -> KnowledgePartition:
    """Coarsest common refinement: non-empty intersections of one cell per input."""
    size = _check_same_space(parts)
    labels = tuple(tuple(p.cell_index(s) for p in parts) for s in range(size))
    return KnowledgePartition.from_labels(labels)


def meet_partitions(parts: Sequence[KnowledgePartition]) -> KnowledgePartition:
    """Finest common coarsening: components of the cell-overlap graph."""
    size = _check_same_space(parts)
    parent = list(range(size))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for p in parts:
        for c in p.cells:
            root = find(c[0])
            for s in c[1:]:
                r = find(s)
                if r != root:
                    parent[r] = root
    return KnowledgePartition.from_labels([find(s) for s in range(size)])
