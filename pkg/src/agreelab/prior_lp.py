"""Common-prior existence and construction.

A common prior ``p`` must satisfy, for every agent cell ``C`` and states
``s, s'`` in it, the cross-multiplied ratio constraint
``p(s) * tau(s'|C) == p(s') * tau(s|C)``, and must give positive mass to every
cell that carries a posterior. The constructor propagates ratios over the
graph linking states that share a cell; a brute-force oracle decides the same
question by exact linear algebra on the full constraint system.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from fractions import Fraction
from itertools import combinations
from typing import Literal, Sequence

from gmpy2 import mpq

from .core import (
    BeliefDistribution,
    Cell,
    KnowledgePartition,
    TypeProfile,
    join_partitions,
    meet_partitions,
)
from .errors import InstanceTooLarge, MalformedPosterior

Scope = Literal["cell", "intersection"]


@dataclass(frozen=True)
class RatioConstraint:
    """``p(s) * tau_other == p(other) * tau_s`` inside one agent cell."""

    state: int
    other: int
    agent: int
    cell: Cell
    tau_state: Fraction
    tau_other: Fraction

    def __post_init__(self):
        if self.state == self.other:
            raise ValueError("a ratio constraint needs two distinct states")
        if self.state not in self.cell or self.other not in self.cell:
            raise ValueError("both states must lie in the cell")

    def residual(self, p: Sequence[Fraction]) -> Fraction:
        return p[self.state] * self.tau_other - p[self.other] * self.tau_state


@dataclass(frozen=True)
class CommonPriorResult:
    status: Literal["feasible", "infeasible"]
    prior: BeliefDistribution | None = None
    witness: tuple | None = None
    constraint_count: int = 0

    @property
    def feasible(self) -> bool:
        return self.status == "feasible"


@dataclass(frozen=True)
class _ConstraintCell:
    agent: int
    states: Cell
    tau: dict  # state -> Fraction, normalized over ``states``
    owner: Cell  # the agent cell this piece belongs to


def _validate(partitions: Sequence[KnowledgePartition], profile: TypeProfile) -> int:
    if len(partitions) != len(profile):
        raise MalformedPosterior("one posterior map per agent is required")
    sizes = {p.size for p in partitions}
    if len(sizes) != 1:
        raise MalformedPosterior("partitions cover different state spaces")
    D = sizes.pop()
    for i, (part, post) in enumerate(zip(partitions, profile.posteriors)):
        cells = set(part.cells)
        for cell, dist in post.items():
            if cell not in cells:
                raise MalformedPosterior(f"agent {i}: {cell} is not one of its cells")
            if len(dist) != D:
                raise MalformedPosterior(f"agent {i}: posterior has wrong length")
            inside = set(cell)
            if any(v != 0 and s not in inside for s, v in enumerate(dist.mass)):
                raise MalformedPosterior(f"agent {i}: posterior support leaves {cell}")
    return D


def _constraint_cells(
    partitions: Sequence[KnowledgePartition], profile: TypeProfile, scope: Scope
) -> list[_ConstraintCell]:
    out: list[_ConstraintCell] = []
    join = join_partitions(partitions) if scope == "intersection" else None
    for i, post in enumerate(profile.posteriors):
        for cell, dist in post.items():
            pieces = [cell] if join is None else [z for z in join.cells if set(z) <= set(cell)]
            for piece in pieces:
                total = sum((dist[s] for s in piece), Fraction(0))
                if total == 0:
                    continue
                out.append(_ConstraintCell(i, piece, {s: dist[s] / total for s in piece}, cell))
    return out


def ratio_constraints(
    partitions: Sequence[KnowledgePartition], profile: TypeProfile, scope: Scope = "cell"
) -> list[RatioConstraint]:
    """Every pairwise cross-multiplied constraint, in a deterministic order."""
    _validate(partitions, profile)
    return [
        RatioConstraint(s, t, k.agent, k.states, k.tau[s], k.tau[t])
        for k in _constraint_cells(partitions, profile, scope)
        for s, t in combinations(k.states, 2)
    ]


def construct_common_prior(
    partitions: Sequence[KnowledgePartition],
    profile: TypeProfile,
    *,
    scope: Scope = "cell",
    tolerance: Fraction | float = 0,
    split: Literal["size", "uniform"] = "size",
) -> CommonPriorResult:
    """Build a common prior by ratio propagation, or explain why none exists.

    ``scope="cell"`` constrains all pairs within each agent cell (full Bayes
    consistency); ``scope="intersection"`` only constrains pairs inside the
    join cells. ``tolerance`` relaxes the consistency check for sampled
    posteriors: each cell's conditional may differ from the posterior by at
    most this much per state. Free mass across independent components is split
    proportionally to their state counts (``split="size"``) or equally.
    """
    D = _validate(partitions, profile)
    tol = Fraction(tolerance) if not isinstance(tolerance, float) else Fraction(repr(tolerance))
    kcells = _constraint_cells(partitions, profile, scope)
    n_constraints = sum(len(k.states) * (len(k.states) - 1) // 2 for k in kcells)

    # zero forcing: a zero posterior entry next to a positive one pins p(s) = 0
    cells_of: list[list[int]] = [[] for _ in range(D)]
    for idx, k in enumerate(kcells):
        for s in k.states:
            cells_of[s].append(idx)
    zero_reason: dict[int, tuple] = {}
    queue: deque[int] = deque()
    for idx, k in enumerate(kcells):
        for s in k.states:
            if k.tau[s] == 0 and s not in zero_reason:
                zero_reason[s] = ("zero_posterior", k.agent, k.states)
                queue.append(s)
    dead_cells: set[int] = set()
    while queue:
        s = queue.popleft()
        for idx in cells_of[s]:
            k = kcells[idx]
            if k.tau[s] > 0 and idx not in dead_cells:
                dead_cells.add(idx)
                for t in k.states:
                    if t not in zero_reason:
                        zero_reason[t] = ("forced_by", k.agent, k.states, s)
                        queue.append(t)
    owners = {(k.agent, k.owner) for k in kcells}
    for agent, owner in sorted(owners):
        if all(s in zero_reason for s in owner):
            k = next(k for k in kcells if k.agent == agent and k.owner == owner)
            start = next((s for s in k.states if k.tau[s] > 0), k.states[0])
            return CommonPriorResult(
                "infeasible",
                witness=("zero_forcing", agent, owner, _zero_chain(zero_reason, start)),
                constraint_count=n_constraints,
            )

    # ratio propagation over live states
    weight: dict[int, Fraction] = {}
    via: dict[int, tuple] = {}
    component: dict[int, int] = {}
    comps: list[list[int]] = []
    for root in range(D):
        if root in zero_reason or root in weight:
            continue
        weight[root] = Fraction(1)
        via[root] = None
        cid = len(comps)
        comps.append([root])
        component[root] = cid
        bfs = deque([root])
        while bfs:
            s = bfs.popleft()
            for idx in cells_of[s]:
                k = kcells[idx]
                for t in k.states:
                    if t in weight or k.tau[t] == 0:
                        continue
                    weight[t] = weight[s] * k.tau[t] / k.tau[s]
                    via[t] = (s, k.agent, k.states)
                    component[t] = cid
                    comps[cid].append(t)
                    bfs.append(t)

    for k in kcells:
        live = [s for s in k.states if k.tau[s] > 0 and s not in zero_reason]
        if not live:
            continue
        total = sum((weight[s] for s in live), Fraction(0))
        for s in live:
            if abs(weight[s] / total - k.tau[s]) > tol:
                anchor = live[0] if live[0] != s else live[-1]
                witness = (
                    "cycle",
                    k.agent,
                    k.states,
                    _ratio_path(via, s),
                    _ratio_path(via, anchor),
                )
                return CommonPriorResult("infeasible", witness=witness, constraint_count=n_constraints)

    if not comps:
        return CommonPriorResult(
            "infeasible", witness=("no_live_state",), constraint_count=n_constraints
        )
    sizes = [len(c) if split == "size" else 1 for c in comps]
    total_size = sum(sizes)
    mass = [Fraction(0)] * D
    for comp, size in zip(comps, sizes):
        comp_total = sum((weight[s] for s in comp), Fraction(0))
        for s in comp:
            mass[s] = Fraction(size, total_size) * weight[s] / comp_total
    return CommonPriorResult("feasible", BeliefDistribution(tuple(mass)), None, n_constraints)


def _zero_chain(reason: dict, s: int) -> tuple:
    chain = [s]
    seen = {s}
    while s in reason and reason[s][0] == "forced_by":
        s = reason[s][3]
        if s in seen:
            break
        seen.add(s)
        chain.append(s)
    return tuple(chain)


def _ratio_path(via: dict, s: int) -> tuple:
    path = [s]
    while via.get(s) is not None:
        s = via[s][0]
        path.append(s)
    return tuple(path)


def verify_common_prior(
    p: BeliefDistribution, partitions: Sequence[KnowledgePartition], profile: TypeProfile
) -> bool:
    """True iff conditioning ``p`` on every positive-mass cell gives the posterior."""
    for post in profile.posteriors:
        for cell, dist in post.items():
            if p.cell_mass(cell) > 0 and p.condition(cell) != dist:
                return False
    return True


def size_condition_holds(partitions: Sequence[KnowledgePartition]) -> bool:
    """Cell-count identity under which every type profile has a common prior."""
    N = len(partitions)
    D = partitions[0].size
    return sum(len(p) for p in partitions) == (N - 1) * D + len(meet_partitions(partitions))


# ---------------------------------------------------------------------------
# brute-force oracle


def _nullspace(rows: list[list], ncols: int) -> list[list]:
    """Exact nullspace basis via reduced row echelon form (entries are mpq)."""
    m = [r[:] for r in rows]
    pivots: list[int] = []
    r = 0
    for c in range(ncols):
        piv = next((i for i in range(r, len(m)) if m[i][c] != 0), None)
        if piv is None:
            continue
        m[r], m[piv] = m[piv], m[r]
        lead = m[r][c]
        m[r] = [v / lead for v in m[r]]
        for i in range(len(m)):
            if i != r and m[i][c] != 0:
                factor = m[i][c]
                m[i] = [a - factor * b for a, b in zip(m[i], m[r])]
        pivots.append(c)
        r += 1
        if r == len(m):
            break
    free = [c for c in range(ncols) if c not in pivots]
    basis = []
    for f in free:
        v = [mpq(0)] * ncols
        v[f] = mpq(1)
        for i, pc in enumerate(pivots):
            v[pc] = -m[i][f]
        basis.append(v)
    return basis


def brute_force_common_prior(
    partitions: Sequence[KnowledgePartition],
    profile: TypeProfile,
    *,
    scope: Scope = "cell",
    max_states: int = 6,
    max_agents: int = 3,
) -> CommonPriorResult:
    """Decide common-prior existence by enumerating extreme rays.

    The solutions of the homogeneous constraint system with ``p >= 0`` form a
    pointed cone generated by its extreme rays. A ray's support ``T`` is
    minimal, i.e. the system restricted to columns ``T`` has a one-dimensional
    nullspace spanned by a strictly one-signed vector. Summing every extreme ray
    gives a solution of maximal support; a common prior exists iff that support
    meets every cell carrying a posterior.
    """
    D = _validate(partitions, profile)
    if D > max_states or len(partitions) > max_agents:
        raise InstanceTooLarge(f"oracle limited to D <= {max_states}, N <= {max_agents}")
    cons = ratio_constraints(partitions, profile, scope)
    zero, one = mpq(0), mpq(1)
    rows = []
    for c in cons:
        row = [zero] * D
        row[c.state] += mpq(c.tau_other.numerator, c.tau_other.denominator)
        row[c.other] -= mpq(c.tau_state.numerator, c.tau_state.denominator)
        rows.append(row)
    # null(A restricted to T) = vectors of null(A) vanishing outside T
    basis = _nullspace(rows, D) if rows else [[mpq(int(i == j)) for i in range(D)] for j in range(D)]
    k = len(basis)
    rays: list[list[Fraction]] = []
    for mask in range(1, 1 << D):
        outside = [s for s in range(D) if not mask >> s & 1]
        coeffs = _nullspace([[basis[j][s] for j in range(k)] for s in outside], k) if outside else (
            [[mpq(int(i == j)) for i in range(k)] for j in range(k)]
        )
        if len(coeffs) != 1:
            continue
        v = [sum((c * basis[j][s] for j, c in enumerate(coeffs[0])), zero) for s in range(D)]
        inside = [v[s] for s in range(D) if mask >> s & 1]
        if all(x > 0 for x in inside) or all(x < 0 for x in inside):
            total = sum(abs(x) for x in v)
            rays.append([Fraction(int((abs(x) / total).numerator), int((abs(x) / total).denominator)) for x in v])
    if not rays:
        return CommonPriorResult("infeasible", witness=("no_ray",), constraint_count=len(cons))
    summed = [sum(col) for col in zip(*rays)]
    support = {s for s, x in enumerate(summed) if x > 0}
    for i, post in enumerate(profile.posteriors):
        for cell in post:
            if not support & set(cell):
                return CommonPriorResult(
                    "infeasible", witness=("uncovered_cell", i, cell), constraint_count=len(cons)
                )
    return CommonPriorResult(
        "feasible", BeliefDistribution.from_weights(summed), None, len(cons)
    )
