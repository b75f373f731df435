"""Message schedules, channels and the agreement meta-protocol.

Messages are public: every agent (and the mediator, when one is used) hears
each message, while the spanning schedule decides who speaks next. Exact
channels refine knowledge partitions; noisy channels (BBF and smoothed) fold
each message into a public likelihood vector instead.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Literal, Sequence

import numpy as np
from scipy.stats import binomtest

from .core import (
    BeliefDistribution,
    KnowledgePartition,
    TaskSpec,
    TypeProfile,
    posterior_tv_distance,
    refine_by_function,
    to_fraction,
)
from .errors import InvalidChannel, NotStronglyConnected, ZeroMassCell
from .prior_lp import construct_common_prior

HIGH, MEDIUM, LOW = "High", "Medium", "Low"
BUCKETS = (HIGH, MEDIUM, LOW)
ChannelKind = Literal["continuous", "discretized", "bbf_discretized", "smoothed", "quantized"]
Measure = Literal["own_prior_per_agent", "common_prior", "worst_case"]


# ---------------------------------------------------------------------------
# communication graph and schedule


@dataclass(frozen=True)
class CommGraph:
    n_agents: int
    edges: frozenset

    def __post_init__(self):
        edges = frozenset((int(a), int(b)) for a, b in self.edges)
        if any(not (0 <= a < self.n_agents and 0 <= b < self.n_agents) or a == b for a, b in edges):
            raise ValueError("edges must join distinct agents in range")
        object.__setattr__(self, "edges", edges)
        if self.n_agents < 1:
            raise ValueError("at least one agent is required")
        if not _strongly_connected(self.n_agents, edges):
            raise NotStronglyConnected(f"graph on {self.n_agents} agents is not strongly connected")

    @classmethod
    def complete(cls, n: int) -> "CommGraph":
        return cls(n, frozenset((a, b) for a in range(n) for b in range(n) if a != b))

    @classmethod
    def ring(cls, n: int, bidirectional: bool = False) -> "CommGraph":
        edges = {(a, (a + 1) % n) for a in range(n) if n > 1}
        if bidirectional:
            edges |= {(b, a) for a, b in edges}
        return cls(n, frozenset(edges))

    def successors(self, a: int) -> list[int]:
        return sorted(b for x, b in self.edges if x == a)

    def predecessors(self, b: int) -> list[int]:
        return sorted(a for a, y in self.edges if y == b)


def _reach(n: int, adj: dict[int, list[int]]) -> set[int]:
    seen, todo = {0}, [0]
    while todo:
        a = todo.pop()
        for b in adj.get(a, []):
            if b not in seen:
                seen.add(b)
                todo.append(b)
    return seen


def _strongly_connected(n: int, edges) -> bool:
    fwd: dict[int, list[int]] = {}
    bwd: dict[int, list[int]] = {}
    for a, b in edges:
        fwd.setdefault(a, []).append(b)
        bwd.setdefault(b, []).append(a)
    return len(_reach(n, fwd)) == n and len(_reach(n, bwd)) == n


@dataclass(frozen=True)
class SpanningSchedule:
    outward: tuple[tuple[int, int], ...]
    inward: tuple[tuple[int, int], ...]
    ordering: tuple[tuple[int, int], ...]
    diameter: int

    @property
    def block_length(self) -> int:
        return len(self.ordering)

    def edge_at(self, t: int) -> tuple[int, int]:
        """Edge used by message ``t`` (0-based)."""
        return self.ordering[t % len(self.ordering)]


def _bfs_tree(n: int, neighbours) -> tuple[list[tuple[int, int]], dict[int, int]]:
    depth = {0: 0}
    order: list[tuple[int, int]] = []
    queue = deque([0])
    while queue:
        a = queue.popleft()
        for b in neighbours(a):
            if b not in depth:
                depth[b] = depth[a] + 1
                order.append((a, b))
                queue.append(b)
    return order, depth


def build_spanning_schedule(graph: CommGraph) -> SpanningSchedule:
    """Breadth-first out- and in-trees rooted at agent 0 and their cyclic order.

    Breadth-first trees have minimum depth from the root. The outward tree is
    listed parent before child; the inward tree deepest edge first, so every
    agent speaks towards the root after hearing from its subtree.
    """
    if not _strongly_connected(graph.n_agents, graph.edges):
        raise NotStronglyConnected("schedule needs a strongly connected graph")
    n = graph.n_agents
    out_edges, out_depth = _bfs_tree(n, graph.successors)
    rev, in_depth = _bfs_tree(n, graph.predecessors)
    in_edges = [(child, parent) for parent, child in rev]
    in_edges.sort(key=lambda e: -in_depth[e[0]])
    diameter = max(list(out_depth.values()) + list(in_depth.values()))
    return SpanningSchedule(
        tuple(out_edges), tuple(in_edges), tuple(out_edges) + tuple(in_edges), diameter
    )


# ---------------------------------------------------------------------------
# channels


@dataclass(frozen=True)
class ChannelSpec:
    kind: ChannelKind = "continuous"
    alpha: Fraction | None = None
    bits: int | None = None
    theta: Fraction | None = None

    def __post_init__(self):
        if self.kind not in ("continuous", "discretized", "bbf_discretized", "smoothed", "quantized"):
            raise InvalidChannel(f"unknown channel kind {self.kind!r}")
        if self.alpha is not None:
            object.__setattr__(self, "alpha", to_fraction(self.alpha))
        if self.theta is not None:
            object.__setattr__(self, "theta", to_fraction(self.theta))
        if self.kind == "bbf_discretized":
            if self.theta is None or not (0 < self.theta <= Fraction(1, 3)):
                raise InvalidChannel("bbf channel needs 0 < theta <= 1/3")
        if self.kind == "smoothed":
            if self.alpha is None or self.bits is None or self.bits < 1:
                raise InvalidChannel("smoothed channel needs alpha and bits")
            L = self.alpha * 2**self.bits
            if L.denominator != 1 or L < 1:
                raise InvalidChannel("alpha * 2^bits must be a positive integer")
        if self.kind == "quantized" and (self.bits is None or self.bits < 0):
            raise InvalidChannel("quantized channel needs bits >= 0")

    @classmethod
    def continuous(cls) -> "ChannelSpec":
        return cls("continuous")

    @classmethod
    def discretized(cls) -> "ChannelSpec":
        return cls("discretized", bits=2)

    @classmethod
    def bbf(cls, theta=Fraction(1, 5)) -> "ChannelSpec":
        return cls("bbf_discretized", bits=2, theta=to_fraction(theta))

    @classmethod
    def smoothed(cls, alpha, bits: int) -> "ChannelSpec":
        return cls("smoothed", alpha=to_fraction(alpha), bits=bits)

    @classmethod
    def quantized(cls, bits: int) -> "ChannelSpec":
        return cls("quantized", bits=bits)

    @classmethod
    def smoothed_for(cls, epsilon, alpha=None, min_bits: int = 1) -> "ChannelSpec":
        """Smallest-bit smoothed channel with a dyadic alpha in [eps/50, eps/40].

        The requested ``alpha`` (default eps/40) is snapped to the nearest
        ``L / 2^b`` inside the band, using the fewest bits that admit one.
        """
        eps = to_fraction(epsilon)
        lo, hi = eps / 50, eps / 40
        target = hi if alpha is None else to_fraction(alpha)
        for b in range(max(min_bits, 1), 64):
            scale = 2**b
            first, last = math.ceil(lo * scale), math.floor(hi * scale)
            if first >= 1 and first <= last:
                L = min(range(first, last + 1), key=lambda x: (abs(Fraction(x, scale) - target), x))
                return cls.smoothed(Fraction(L, scale), b)
        raise InvalidChannel("no dyadic alpha inside the band")

    @property
    def beta(self) -> Fraction | None:
        if self.kind != "bbf_discretized":
            return None
        return (1 - 2 * self.theta) / self.theta

    @property
    def half_width(self) -> int | None:
        """L = alpha * 2^bits for the smoothed channel."""
        if self.kind != "smoothed":
            return None
        return int(self.alpha * 2**self.bits)

    @property
    def bit_cost(self) -> int | None:
        if self.kind == "continuous":
            return None
        if self.kind in ("discretized", "bbf_discretized"):
            return 2
        return self.bits

    @property
    def is_noisy(self) -> bool:
        return self.kind in ("bbf_discretized", "smoothed")

    @property
    def uses_mediator(self) -> bool:
        return self.kind in ("discretized", "bbf_discretized")

    def check_band(self, epsilon) -> None:
        if self.kind == "smoothed":
            eps = to_fraction(epsilon)
            if not (eps / 50 <= self.alpha <= eps / 40):
                raise InvalidChannel(f"alpha={self.alpha} outside [eps/50, eps/40] for eps={eps}")


def triangular_pmf(x: int, L: int) -> Fraction:
    """P[r = x] = (L - |x|) / L^2 on [-L, L]."""
    return Fraction(max(L - abs(x), 0), L * L)


def smoothed_offset(L: int, rng: np.random.Generator) -> int:
    """Draw r with P[r = x] = (L - |x|) / L^2."""
    if L < 1:
        raise ValueError("L must be at least 1")
    # the sum of two independent uniforms on {0..L-1} minus L-1 has this law
    return int(rng.integers(0, L)) - int(rng.integers(0, L))


def round_to_grid(value: Fraction, bits: int) -> Fraction:
    scale = 2**bits
    return Fraction(math.floor(value * scale + Fraction(1, 2)), scale)


def quantize(value: Fraction, bits: int) -> Fraction:
    scale = 2**bits
    return Fraction(min(math.floor(value * scale), scale - 1), scale)


def discretize_bucket(e_sender, e_mediator, epsilon) -> str:
    """High/Low when the sender is more than eps/4 above/below the mediator."""
    e_sender, e_mediator, eps = to_fraction(e_sender), to_fraction(e_mediator), to_fraction(epsilon)
    if e_sender > e_mediator + eps / 4:
        return HIGH
    if e_sender < e_mediator - eps / 4:
        return LOW
    return MEDIUM


def bbf_channel(bucket: str, theta, rng: np.random.Generator) -> str:
    """Send the matching codeword w.p. 1-2θ and each other codeword w.p. θ."""
    theta = to_fraction(theta)
    if not (0 < theta <= Fraction(1, 3)):
        raise InvalidChannel("theta must lie in (0, 1/3]")
    u = rng.random()
    if u < float(1 - 2 * theta):
        return bucket
    others = [b for b in BUCKETS if b != bucket]
    return others[0] if u < float(1 - theta) else others[1]


def bbf_likelihood(codeword: str, bucket: str, theta: Fraction) -> Fraction:
    return 1 - 2 * theta if codeword == bucket else theta


def check_agreement(expectations: Sequence, epsilon) -> bool:
    """True iff all pairwise gaps are at most epsilon."""
    vals = list(expectations)
    if len(vals) < 2:
        return True
    return max(vals) - min(vals) <= epsilon


# ---------------------------------------------------------------------------
# transcripts and run state


@dataclass(frozen=True)
class Message:
    round: int
    sender: int
    receiver: int
    task: int
    payload: object
    bit_cost: int | None
    channel: str
    likelihood: tuple | None = None


@dataclass
class Snapshot:
    round: int
    expectations: tuple[Fraction, ...]
    partition_sizes: tuple[int, ...]
    mediator_size: int | None = None


@dataclass
class Transcript:
    task: int
    messages: list[Message] = field(default_factory=list)
    snapshots: list[Snapshot] = field(default_factory=list)

    @property
    def n_messages(self) -> int:
        return len(self.messages)

    @property
    def total_bits(self) -> int:
        return sum(m.bit_cost for m in self.messages if m.bit_cost is not None)

    @property
    def unbounded(self) -> bool:
        return any(m.bit_cost is None for m in self.messages)


@dataclass(frozen=True)
class RunConfig:
    """Knobs for :func:`run_agreement`.

    ``round_cap_scale`` multiplies 16 (N^2 D + N^7 / (eps delta)^2); ``max_rounds``
    overrides the cap outright. ``require_common_prior`` keeps exchanging until
    a common prior has been adopted before accepting agreement.
    """

    round_cap_scale: float = 1e-3
    max_rounds: int | None = None
    require_common_prior: bool = False
    mediator_prior: Literal["average"] | int = "average"
    construct_prior: bool = True
    stall_detection: bool = True
    true_state: int | None = None
    state_measure: Literal["average"] | int | BeliefDistribution = "average"
    record_snapshots: bool = True


def round_cap(task: TaskSpec, scale: float) -> int:
    N, D = task.n_agents, task.size
    raw = 16 * (N * N * D + Fraction(N**7) / (task.epsilon * task.delta) ** 2)
    return max(1, math.ceil(raw * Fraction(repr(scale))))


@dataclass
class Outcome:
    task: int
    true_state: int
    agreed: bool
    rounds: int
    rounds_to_agreement: int | None
    rounds_to_common_prior: int | None
    refinements_to_common_prior: int | None
    refinement_rounds: tuple[int, ...]
    bits: int
    unbounded_bits: bool
    stalled: bool
    cap_exceeded: bool
    expectations: tuple[Fraction, ...]
    posterior_tv: Fraction
    common_prior: BeliefDistribution | None = None


def _average(priors: Sequence[BeliefDistribution]) -> BeliefDistribution:
    n = len(priors)
    return BeliefDistribution(tuple(sum(col) / n for col in zip(*(p.mass for p in priors))))


class AgreementState:
    """Mutable state of one task's run (internal to a single sequential run)."""

    def __init__(self, task: TaskSpec, channel: ChannelSpec, true_state: int, config: RunConfig):
        self.task = task
        self.channel = channel
        self.config = config
        self.true_state = true_state
        self.D = task.size
        self.N = task.n_agents
        self.f = task.objective
        self.priors = list(task.priors)
        self.partitions = list(task.partitions)
        self.weights = [Fraction(1)] * self.D
        self.round = 0
        self.common_prior: BeliefDistribution | None = None
        self.rounds_to_cp: int | None = None
        self.refinements = 0
        self.refinements_to_cp: int | None = None
        self.refinement_rounds: list[int] = []
        if channel.uses_mediator:
            mp = config.mediator_prior
            self.mediator_prior = _average(self.priors) if mp == "average" else self.priors[int(mp)]
            self.mediator_partition = KnowledgePartition.trivial(self.D)
        else:
            self.mediator_prior = None
            self.mediator_partition = None
        self.mediator_refined = False
        self._cache: dict = {}

    # expectations -------------------------------------------------------
    def _cell_values(self, prior: BeliefDistribution, part: KnowledgePartition) -> dict:
        key = (id(prior), part, tuple(self.weights))
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        out = {}
        for cell in part.cells:
            mass = sum((prior[s] * self.weights[s] for s in cell), Fraction(0))
            if mass > 0:
                out[cell] = sum((self.f[s] * prior[s] * self.weights[s] for s in cell), Fraction(0)) / mass
            else:
                out[cell] = None
        self._cache = {key: out} if len(self._cache) > 64 else {**self._cache, key: out}
        return out

    def expectation_map(self, agent: int) -> list:
        part = self.partitions[agent]
        vals = self._cell_values(self.priors[agent], part)
        return [vals[part.cell_of(s)] for s in range(self.D)]

    def mediator_map(self) -> list:
        vals = self._cell_values(self.mediator_prior, self.mediator_partition)
        return [vals[self.mediator_partition.cell_of(s)] for s in range(self.D)]

    def expectations_at_truth(self) -> tuple[Fraction, ...]:
        out = []
        for i in range(self.N):
            v = self.expectation_map(i)[self.true_state]
            if v is None:
                # own prior puts no mass on the true cell: fall back to the public weights
                cell = self.partitions[i].cell_of(self.true_state)
                mass = sum((self.weights[s] for s in cell), Fraction(0))
                v = sum((self.f[s] * self.weights[s] for s in cell), Fraction(0)) / mass
            out.append(v)
        return tuple(out)

    def agreed(self) -> bool:
        return check_agreement(self.expectations_at_truth(), self.task.epsilon)

    def posterior_tv(self) -> Fraction:
        posts = []
        for i in range(self.N):
            cell = self.partitions[i].cell_of(self.true_state)
            w = [self.priors[i][s] * self.weights[s] if s in cell else Fraction(0) for s in range(self.D)]
            if sum(w) == 0:
                continue
            posts.append(BeliefDistribution.from_weights(w))
        best = Fraction(0)
        for a in range(len(posts)):
            for b in range(a + 1, len(posts)):
                best = max(best, posterior_tv_distance(posts[a], posts[b]))
        return best

    # common prior -------------------------------------------------------
    def type_profile(self) -> TypeProfile:
        out = []
        for i in range(self.N):
            post = {}
            for cell in self.partitions[i].cells:
                w = [self.priors[i][s] * self.weights[s] if s in cell else Fraction(0) for s in range(self.D)]
                if sum(w) > 0:
                    post[cell] = BeliefDistribution.from_weights(w)
            out.append(post)
        return TypeProfile(tuple(out))

    def try_common_prior(self) -> bool:
        if self.common_prior is not None or not self.config.construct_prior:
            return False
        res = construct_common_prior(self.partitions, self.type_profile())
        if not res.feasible:
            return False
        cp = res.prior
        self.common_prior = cp
        self.rounds_to_cp = self.round
        self.refinements_to_cp = self.refinements
        # the common prior already absorbs the public evidence
        self.priors = [cp] * self.N
        if self.mediator_prior is not None:
            self.mediator_prior = cp
        self.weights = [Fraction(1) if cp[s] > 0 or self.weights[s] > 0 else Fraction(0) for s in range(self.D)]
        self._cache = {}
        return True

    def snapshot(self) -> Snapshot:
        return Snapshot(
            self.round,
            self.expectations_at_truth(),
            tuple(len(p) for p in self.partitions),
            None if self.mediator_partition is None else len(self.mediator_partition),
        )

    def check_mediator(self) -> None:
        if self.mediator_partition is None:
            return
        for p in self.partitions:
            if not p.refines(self.mediator_partition):
                raise AssertionError("an agent partition fails to refine the mediator's")


def exchange_round(
    state: AgreementState,
    schedule: SpanningSchedule,
    channel: ChannelSpec,
    rng: np.random.Generator,
) -> tuple[AgreementState, Message, bool]:
    """Send the next scheduled message and apply it to every listener.

    Returns the state, the message and whether any partition was properly
    refined.
    """
    sender, receiver = schedule.edge_at(state.round)
    state.mediator_refined = False
    emap = state.expectation_map(sender)
    truth = state.true_state
    if emap[truth] is None:
        emap[truth] = state.expectations_at_truth()[sender]
    eps = state.task.epsilon
    kind = channel.kind
    likelihood = None
    if kind == "continuous":
        per_state, payload = emap, emap[truth]
    elif kind == "quantized":
        per_state = [None if e is None else quantize(e, channel.bits) for e in emap]
        payload = per_state[truth]
    elif kind in ("discretized", "bbf_discretized"):
        fmap = state.mediator_map()
        per_state = [
            None if e is None or m is None else discretize_bucket(e, m, eps) for e, m in zip(emap, fmap)
        ]
        payload = per_state[truth]
        if kind == "bbf_discretized":
            payload = bbf_channel(per_state[truth], channel.theta, rng)
            likelihood = tuple(
                Fraction(0) if b is None else bbf_likelihood(payload, b, channel.theta) for b in per_state
            )
    else:  # smoothed
        enc = [None if e is None else round_to_grid(e, channel.bits) for e in emap]
        L = channel.half_width
        payload = enc[truth] + Fraction(smoothed_offset(L, rng), 2**channel.bits)
        likelihood = tuple(
            Fraction(0) if x is None else triangular_pmf(int((payload - x) * 2**channel.bits), L) for x in enc
        )

    refined = False
    if likelihood is None:
        new_parts = [refine_by_function(p, per_state) for p in state.partitions]
        for old, new in zip(state.partitions, new_parts):
            if len(new) > len(old):
                refined = True
        state.refinements += sum(len(n) - len(o) for o, n in zip(state.partitions, new_parts))
        state.partitions = new_parts
        if state.mediator_partition is not None:
            new_med = refine_by_function(state.mediator_partition, per_state)
            state.mediator_refined = len(new_med) > len(state.mediator_partition)
            state.mediator_partition = new_med
    else:
        state.weights = [w * l for w, l in zip(state.weights, likelihood)]
    state.round += 1
    if refined:
        state.refinement_rounds.append(state.round)
    msg = Message(state.round, sender, receiver, state.task.space.task_id, payload, channel.bit_cost, kind, likelihood)
    return state, msg, refined


def _draw_state(task: TaskSpec, config: RunConfig, rng: np.random.Generator) -> int:
    if config.true_state is not None:
        return int(config.true_state)
    m = config.state_measure
    if isinstance(m, BeliefDistribution):
        dist = m
    elif m == "average":
        dist = _average(task.priors)
    else:
        dist = task.priors[int(m)]
    probs = np.array([float(x) for x in dist.mass])
    return int(rng.choice(task.size, p=probs / probs.sum()))


def run_task(
    task: TaskSpec,
    schedule: SpanningSchedule,
    channel: ChannelSpec,
    rng: np.random.Generator,
    config: RunConfig = RunConfig(),
) -> tuple[Transcript, Outcome]:
    """Run the meta-protocol on one task until agreement, a stall or the cap."""
    channel.check_band(task.epsilon)
    true_state = _draw_state(task, config, rng)
    state = AgreementState(task, channel, true_state, config)
    transcript = Transcript(task.space.task_id)
    cap = config.max_rounds if config.max_rounds is not None else round_cap(task, config.round_cap_scale)
    block = max(schedule.block_length, 1)
    state.try_common_prior()
    if config.record_snapshots:
        transcript.snapshots.append(state.snapshot())

    def done() -> bool:
        if config.require_common_prior and state.common_prior is None and config.construct_prior:
            return False
        return state.agreed()

    stalled = cap_hit = False
    quiet = 0
    while not done():
        if state.round >= cap or schedule.block_length == 0:
            cap_hit = state.round >= cap
            stalled = schedule.block_length == 0
            break
        state, msg, refined = exchange_round(state, schedule, channel, rng)
        transcript.messages.append(msg)
        adopted = state.try_common_prior()
        state.check_mediator()
        if config.record_snapshots:
            transcript.snapshots.append(state.snapshot())
        progress = refined or adopted or channel.is_noisy or state.mediator_refined
        quiet = 0 if progress else quiet + 1
        if config.stall_detection and quiet >= block:
            stalled = True
            break

    agreed = state.agreed()
    outcome = Outcome(
        task=task.space.task_id,
        true_state=true_state,
        agreed=agreed,
        rounds=state.round,
        rounds_to_agreement=state.round if agreed else None,
        rounds_to_common_prior=state.rounds_to_cp,
        refinements_to_common_prior=state.refinements_to_cp,
        refinement_rounds=tuple(state.refinement_rounds),
        bits=transcript.total_bits,
        unbounded_bits=transcript.unbounded,
        stalled=stalled and not agreed,
        cap_exceeded=cap_hit and not agreed,
        expectations=state.expectations_at_truth(),
        posterior_tv=state.posterior_tv(),
        common_prior=state.common_prior,
    )
    return transcript, outcome


def run_agreement(
    tasks: Sequence[TaskSpec],
    graph: CommGraph,
    channel: ChannelSpec,
    seed: int,
    config: RunConfig = RunConfig(),
) -> list[tuple[Transcript, Outcome]]:
    """Run every task in turn with one seeded generator."""
    if not tasks:
        raise ValueError("at least one task is required")
    schedule = build_spanning_schedule(graph)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    for task in tasks:
        if task.n_agents != graph.n_agents:
            raise ValueError("task agent count differs from the graph")
    return [run_task(task, schedule, channel, rng, config) for task in tasks]


# ---------------------------------------------------------------------------
# agreement probability


@dataclass(frozen=True)
class AgreementEstimate:
    task: int
    measure: str
    successes: int
    trials: int
    estimate: float
    ci_low: float
    ci_high: float
    per_agent: tuple = ()
    measure_used: str = ""


def wilson_interval(successes: int, trials: int, confidence: float = 0.95) -> tuple[float, float]:
    ci = binomtest(successes, trials).proportion_ci(confidence_level=confidence, method="wilson")
    return float(ci.low), float(ci.high)


def trial_seed(master: int, *counter: int) -> np.random.SeedSequence:
    """Counter-based child seed: the same (master, counter) always maps to the same stream."""
    return np.random.SeedSequence([int(master), *map(int, counter)])


def _frequency(task, schedule, channel, config, dist, trials, seed, salt) -> int:
    hits = 0
    for t in range(trials):
        rng = np.random.default_rng(trial_seed(seed, salt, t))
        cfg = replace(config, state_measure=dist, true_state=None, record_snapshots=False)
        _, out = run_task(task, schedule, channel, rng, cfg)
        hits += check_agreement(out.expectations, task.epsilon)
    return hits


def estimate_agreement_probability(
    tasks: Sequence[TaskSpec],
    graph: CommGraph,
    channel: ChannelSpec,
    trials: int,
    measure: Measure = "worst_case",
    seed: int = 0,
    config: RunConfig = RunConfig(),
) -> list[AgreementEstimate]:
    """Monte-Carlo frequency of pairwise eps-agreement at the end of the run.

    The true state is drawn from each agent's prior (``own_prior_per_agent``),
    from the common prior of the initial type profile (``common_prior``,
    falling back to the average prior when none exists), or from every agent's
    prior with the smallest frequency reported (``worst_case``).
    """
    if trials < 1:
        raise ValueError("trials must be positive")
    schedule = build_spanning_schedule(graph)
    out = []
    for j, task in enumerate(tasks):
        if measure == "common_prior":
            res = construct_common_prior(task.partitions, TypeProfile.from_priors(task.partitions, task.priors))
            dist, used = (res.prior, "common_prior") if res.feasible else (_average(task.priors), "average_prior")
            k = _frequency(task, schedule, channel, config, dist, trials, seed, j)
            lo, hi = wilson_interval(k, trials)
            out.append(AgreementEstimate(task.space.task_id, measure, k, trials, k / trials, lo, hi, (), used))
            continue
        per_agent = []
        for i, prior in enumerate(task.priors):
            k = _frequency(task, schedule, channel, config, prior, trials, seed, j * 1000 + i)
            per_agent.append((i, k))
        if measure == "own_prior_per_agent":
            total = sum(k for _, k in per_agent)
            n = trials * len(per_agent)
        else:
            _, total = min(per_agent, key=lambda x: x[1])
            n = trials
        lo, hi = wilson_interval(total, n)
        summary = tuple((i, k / trials) for i, k in per_agent)
        out.append(AgreementEstimate(task.space.task_id, measure, total, n, total / n, lo, hi, summary, measure))
    return out


__all__ = [
    "AgreementEstimate",
    "AgreementState",
    "BUCKETS",
    "ChannelSpec",
    "CommGraph",
    "HIGH",
    "LOW",
    "MEDIUM",
    "Message",
    "Outcome",
    "RunConfig",
    "SpanningSchedule",
    "Snapshot",
    "Transcript",
    "ZeroMassCell",
    "bbf_channel",
    "bbf_likelihood",
    "build_spanning_schedule",
    "check_agreement",
    "discretize_bucket",
    "estimate_agreement_probability",
    "exchange_round",
    "quantize",
    "round_cap",
    "round_to_grid",
    "run_agreement",
    "run_task",
    "smoothed_offset",
    "triangular_pmf",
    "trial_seed",
    "wilson_interval",
]
