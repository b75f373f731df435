"""Sampling trees and message-by-message simulation for bounded agents.

A bounded agent never conditions exactly. It pre-draws a tree of states from
unconditional priors, then answers every query by reweighting the nodes of one
tree level: a node's weight is the product of the channel likelihoods of the
messages heard so far, evaluated at the node's state label.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Literal, Sequence

import numpy as np

from .core import (
    BeliefDistribution,
    KnowledgePartition,
    TaskSpec,
    TypeProfile,
    refine_by_function,
    to_fraction,
)
from .errors import (
    BudgetExceeded,
    DegenerateSubtree,
    InstanceTooLarge,
    ParameterOutOfRange,
)
from .prior_lp import construct_common_prior
from .protocol import (
    ChannelSpec,
    CommGraph,
    Message,
    RunConfig,
    Transcript,
    build_spanning_schedule,
    check_agreement,
    HIGH,
    LOW,
    MEDIUM,
    run_task,
    smoothed_offset,
    trial_seed,
    wilson_interval,
)

DEFAULT_NODE_BUDGET = 10_000_000
PHASES = ("find_CP", "construct_CP", "agree_CP")
AgentClass = Literal["H", "AI"]


# ---------------------------------------------------------------------------
# cost model and ledger


@dataclass(frozen=True)
class CostModel:
    """Unit costs per agent class; agents ``0..q-1`` are humans."""

    T_eval_H: float = 1.0
    T_eval_AI: float = 1.0
    T_sample_H: float = 1.0
    T_sample_AI: float = 1.0
    q: int = 1
    n_agents: int = 2

    def __post_init__(self):
        if not (1 <= self.q < self.n_agents):
            raise ParameterOutOfRange("need 1 <= q < N")
        for name in ("T_eval_H", "T_eval_AI", "T_sample_H", "T_sample_AI"):
            if getattr(self, name) < 0:
                raise ParameterOutOfRange(f"{name} must be non-negative")

    def agent_class(self, agent: int) -> AgentClass:
        return "H" if agent < self.q else "AI"

    def sample_cost(self, cls: AgentClass) -> float:
        return self.T_sample_H if cls == "H" else self.T_sample_AI

    def eval_cost(self, cls: AgentClass) -> float:
        return self.T_eval_H if cls == "H" else self.T_eval_AI


@dataclass
class CostLedger:
    """Sample and evaluation counts keyed by (phase, agent class)."""

    samples: Counter = field(default_factory=Counter)
    evals: Counter = field(default_factory=Counter)

    def charge(self, phase: str, cls: AgentClass, samples: int = 0, evals: int = 0) -> None:
        if samples < 0 or evals < 0:
            raise ValueError("charges must be non-negative")
        if samples:
            self.samples[(phase, cls)] += int(samples)
        if evals:
            self.evals[(phase, cls)] += int(evals)

    def count(self, kind: Literal["samples", "evals"], phase: str | None = None, cls: str | None = None) -> int:
        table = self.samples if kind == "samples" else self.evals
        return sum(v for (p, c), v in table.items() if (phase is None or p == phase) and (cls is None or c == cls))

    def total(self, model: CostModel, phase: str | None = None) -> float:
        out = 0.0
        for cls in ("H", "AI"):
            out += self.count("samples", phase, cls) * model.sample_cost(cls)
            out += self.count("evals", phase, cls) * model.eval_cost(cls)
        return out

    def merge(self, other: "CostLedger") -> None:
        self.samples.update(other.samples)
        self.evals.update(other.evals)

    def as_dict(self) -> dict:
        keys = sorted(set(self.samples) | set(self.evals))
        return {f"{p}/{c}": {"samples": self.samples[(p, c)], "evals": self.evals[(p, c)]} for p, c in keys}


# ---------------------------------------------------------------------------
# sampling trees


def tree_node_count(B: int, R: int) -> int:
    """B + B^2 + ... + B^R."""
    if B < 1 or R < 0:
        raise ParameterOutOfRange("need B >= 1 and R >= 0")
    if B == 1:
        return R
    return (B ** (R + 1) - 1) // (B - 1) - 1


@dataclass(frozen=True)
class SamplingTree:
    """Levels ``1..height`` of i.i.d. draws; node ``k`` on a level hangs under node ``k // B``.

    ``counts[l-1]`` holds per-state node counts of level ``l``; ``labels`` keeps
    the node labels themselves when the tree was small enough to materialize.
    """

    owner: int
    height: int
    branching: int
    active: tuple[int, ...]
    counts: tuple[np.ndarray, ...]
    labels: tuple[np.ndarray, ...] | None
    values: np.ndarray

    @property
    def n_states(self) -> int:
        return len(self.values)

    @property
    def node_count(self) -> int:
        return int(sum(int(c.sum()) for c in self.counts))

    def level_size(self, level: int) -> int:
        return self.branching**level

    def parent(self, level: int, k: int) -> int:
        """Index of the parent on ``level - 1`` (0 means the root)."""
        if level <= 1:
            return 0
        return k // self.branching

    def level_for(self, agent: int, history_length: int) -> int:
        """Level to consult for ``agent``: the first one at or after the current
        position drawn from that agent's prior, else the last one before it."""
        start = history_length + 1
        for lvl in range(start, self.height + 1):
            if self.active[lvl - 1] == agent:
                return lvl
        for lvl in range(min(start, self.height), 0, -1):
            if self.active[lvl - 1] == agent:
                return lvl
        return min(start, self.height)


def _probs(prior: BeliefDistribution) -> np.ndarray:
    p = np.array([float(x) for x in prior.mass])
    return p / p.sum()


def build_sampling_tree(
    task: TaskSpec,
    active: Sequence[int],
    B: int,
    R: int,
    cost_model: CostModel,
    rng: np.random.Generator,
    *,
    owner: int = 0,
    priors: Sequence[BeliefDistribution] | None = None,
    ledger: CostLedger | None = None,
    phase: str = "find_CP",
    budget: int = DEFAULT_NODE_BUDGET,
    materialize_limit: int = 2**20,
) -> tuple[SamplingTree, CostLedger]:
    """Draw level ``l`` i.i.d. from the prior of ``active[l-1]``.

    Every node costs one sample and one objective evaluation, charged to the
    owner's agent class.
    """
    if B < 2 or R < 1:
        raise ParameterOutOfRange("need B >= 2 and R >= 1")
    if len(active) < R:
        raise ParameterOutOfRange("active-agent sequence shorter than the tree height")
    total = tree_node_count(B, R)
    if total > budget:
        raise BudgetExceeded(f"tree with B={B}, R={R} has {total} nodes, budget is {budget}")
    priors = list(task.priors if priors is None else priors)
    D = task.size
    materialize = total <= materialize_limit
    counts, labels = [], []
    for lvl in range(1, R + 1):
        p = _probs(priors[active[lvl - 1]])
        size = B**lvl
        if materialize:
            lab = rng.choice(D, size=size, p=p).astype(np.int32)
            labels.append(lab)
            counts.append(np.bincount(lab, minlength=D))
        else:
            counts.append(rng.multinomial(size, p))
    ledger = CostLedger() if ledger is None else ledger
    ledger.charge(phase, cost_model.agent_class(owner), samples=total, evals=total)
    values = np.array([float(v) for v in task.objective.values])
    tree = SamplingTree(
        owner, R, B, tuple(int(a) for a in active[:R]), tuple(counts), tuple(labels) if materialize else None, values
    )
    return tree, ledger


@dataclass(frozen=True)
class HistoryEntry:
    """One heard message as a listener models it.

    ``payload`` and ``encoding`` are in channel grid units for the smoothed
    channel and arbitrary hashable codes for deterministic channels;
    ``encoding[s]`` is what the sender would have said at state ``s`` (None
    when the listener cannot model it, which leaves that state unweighted).
    """

    sender: int
    payload: object
    encoding: tuple


def triangular_weights(offsets: np.ndarray, L: int) -> np.ndarray:
    return np.maximum(L - np.abs(offsets), 0) / (L * L)


def message_likelihood(entry: HistoryEntry, channel: ChannelSpec) -> np.ndarray:
    out = np.ones(len(entry.encoding))
    for s, e in enumerate(entry.encoding):
        if e is None:
            continue
        if channel.kind == "smoothed":
            out[s] = max(channel.half_width - abs(int(entry.payload) - int(e)), 0) / channel.half_width**2
        else:
            out[s] = 1.0 if e == entry.payload else 0.0
    return out


def history_weights(history: Sequence[HistoryEntry], channel: ChannelSpec, n_states: int) -> np.ndarray:
    w = np.ones(n_states)
    for entry in history:
        w = w * message_likelihood(entry, channel)
    return w


def _level_posterior(tree: SamplingTree, w: np.ndarray, level: int, cell) -> np.ndarray:
    mass = tree.counts[level - 1] * w
    if cell is not None:
        mask = np.zeros(tree.n_states)
        mask[list(cell)] = 1.0
        mass = mass * mask
    return mass


def tree_expectation(
    tree: SamplingTree,
    history: Sequence[HistoryEntry],
    channel: ChannelSpec,
    *,
    cell=None,
    level: int | None = None,
) -> float:
    """Weighted mean of f over one tree level, optionally restricted to a cell.

    With no history and no cell this is the plain mean over the B root children.
    """
    if level is None:
        if len(history) >= tree.height:
            raise ParameterOutOfRange("history must be shorter than the tree height")
        level = len(history) + 1
    if not (1 <= level <= tree.height):
        raise ParameterOutOfRange("level outside the tree")
    mass = _level_posterior(tree, history_weights(history, channel, tree.n_states), level, cell)
    den = mass.sum()
    if den <= 0:
        raise DegenerateSubtree(f"no weight left on level {level}")
    return float(np.clip((mass * tree.values).sum() / den, 0.0, 1.0))


# ---------------------------------------------------------------------------
# parameter formulas


def required_sample_size(epsilon, delta_prime) -> int:
    """Two-sided Hoeffding count: ceil(ln(2/delta') / (2 eps^2))."""
    eps, dp = float(epsilon), float(delta_prime)
    if not (0 < eps < 1) or not (0 < dp < 1):
        raise ParameterOutOfRange("need 0 < eps, delta' < 1")
    return max(1, math.ceil(math.log(2 / dp) / (2 * eps * eps) - 1e-12))


@dataclass(frozen=True)
class WannabeParams:
    """Branching and bit requirements for bounded agents to pass as exact ones.

    Huge powers stay symbolic: ``B' ~ base ** tree_exponent / rho**2`` and the
    total node count ``B' ** R'`` is ``base ** run_exponent * rho ** -rho_exponent``.
    """

    M: int
    N: int
    epsilon: Fraction
    delta: Fraction
    rho: Fraction
    alpha: Fraction
    rounds: Fraction
    base: Fraction
    tree_exponent: Fraction
    bits: int
    run_coefficient: int
    rho_coefficient: int
    run_exponent: Fraction
    rho_exponent: Fraction

    @property
    def log10_branching(self) -> float:
        """log10 of B' = (11/alpha)^(R'^2) / rho^2."""
        return float(self.tree_exponent) * math.log10(float(self.base)) - 2 * math.log10(float(self.rho))

    @property
    def log10_log10_total(self) -> float:
        """log10 log10 of (11/alpha)^run_exponent / rho^rho_exponent."""
        x = float(self.run_exponent) * math.log10(float(self.base)) - float(self.rho_exponent) * math.log10(
            float(self.rho)
        )
        return math.log10(x)


def wannabe_params(M: int, N: int, epsilon, delta_agree, rho, alpha) -> WannabeParams:
    eps, dl, rho, alpha = map(to_fraction, (epsilon, delta_agree, rho, alpha))
    if M < 1 or N < 2:
        raise ParameterOutOfRange("need M >= 1 and N >= 2")
    if not (0 < eps <= 1 and 0 < dl <= 1 and 0 < rho <= 1 and 0 < alpha < 1):
        raise ParameterOutOfRange("need eps, delta, rho in (0, 1] and alpha in (0, 1)")
    de = dl * eps
    rounds = Fraction(9 * M**2 * N**7) / de**2
    base = 11 / alpha
    bits = math.ceil(math.log2(rounds / (rho * alpha)) - 1e-12) + 2
    run_coef = 729 * M**6 * N**21
    rho_coef = 18 * M**2 * N**7
    return WannabeParams(
        M=M,
        N=N,
        epsilon=eps,
        delta=dl,
        rho=rho,
        alpha=alpha,
        rounds=rounds,
        base=base,
        tree_exponent=rounds**2,
        bits=bits,
        run_coefficient=run_coef,
        rho_coefficient=rho_coef,
        run_exponent=run_coef / de**6,
        rho_exponent=rho_coef / de**2,
    )


# ---------------------------------------------------------------------------
# bounded agreement run


@dataclass(frozen=True)
class BoundedOutcome:
    task: int
    true_state: int
    agreed: bool
    estimates: tuple[float, ...]
    messages: int
    phase_messages: dict
    surprises: int
    refinements: int
    degenerate: int
    common_prior_found: bool
    rounds_to_common_prior: int | None
    cp_attempts: int
    samples_per_attempt: int
    tree_builds: dict
    nodes_per_tree: dict
    bits: int


@dataclass
class BoundedRun:
    transcripts: list[Transcript]
    outcomes: list[BoundedOutcome]
    ledger: CostLedger


class _Agents:
    """Per-task mutable state of a bounded run."""

    def __init__(self, task: TaskSpec, channel: ChannelSpec, truth: int):
        self.task = task
        self.channel = channel
        self.truth = truth
        self.N = task.n_agents
        self.D = task.size
        self.scale = 2**channel.bits
        self.partitions = list(task.partitions)
        self.trees: list[SamplingTree] = []
        self.histories: list[list[HistoryEntry]] = []
        self.degenerate = 0

    def reset_trees(self, trees: list[SamplingTree]) -> None:
        self.trees = trees
        self.histories = [[] for _ in range(self.N)]

    def cell_estimate(self, owner: int, agent: int, cell) -> float | None:
        """``owner``'s tree estimate of what ``agent`` expects given ``cell``."""
        tree = self.trees[owner]
        lvl = tree.level_for(agent, len(self.histories[owner]))
        try:
            return tree_expectation(tree, self.histories[owner], self.channel, cell=cell, level=lvl)
        except DegenerateSubtree:
            return None

    def estimate(self, agent: int) -> float:
        cell = self.partitions[agent].cell_of(self.truth)
        v = self.cell_estimate(agent, agent, cell)
        if v is None:
            # surprise handling: an empty subtree falls back to the whole level
            self.degenerate += 1
            v = self.cell_estimate(agent, agent, None)
            if v is None:
                tree = self.trees[agent]
                lvl = tree.level_for(agent, len(self.histories[agent]))
                c = tree.counts[lvl - 1]
                v = float((c * tree.values).sum() / c.sum())
        return v

    def encoding_map(self, owner: int, agent: int) -> tuple:
        """Grid encoding of ``agent``'s expectation at every state, as ``owner`` models it."""
        out: list = [None] * self.D
        for cell in self.partitions[agent].cells:
            v = self.cell_estimate(owner, agent, cell)
            code = None if v is None else int(math.floor(v * self.scale + 0.5))
            for s in cell:
                out[s] = code
        return tuple(out)

    def message_probability(self, agent: int, payload: int) -> float:
        """Chance, under ``agent``'s own posterior, that its own noisy report equals ``payload``."""
        tree = self.trees[agent]
        lvl = tree.level_for(agent, len(self.histories[agent]))
        w = history_weights(self.histories[agent], self.channel, self.D)
        mass = _level_posterior(tree, w, lvl, self.partitions[agent].cell_of(self.truth))
        if mass.sum() <= 0:
            mass = _level_posterior(tree, np.ones(self.D), lvl, None)
        enc = self.encoding_map(agent, agent)
        lik = np.array(
            [0.0 if e is None else max(self.channel.half_width - abs(payload - e), 0) for e in enc]
        ) / self.channel.half_width**2
        return float((mass * lik).sum() / mass.sum())


def _estimate_common_prior(
    agents: _Agents,
    rngs: Sequence[np.random.Generator],
    S: int,
    tolerance: float,
    cost_model: CostModel,
    ledger: CostLedger,
) -> BeliefDistribution | None:
    task = agents.task
    posts = []
    for i in range(agents.N):
        draws = rngs[i].choice(task.size, size=S, p=_probs(task.priors[i]))
        ledger.charge("construct_CP", cost_model.agent_class(i), samples=S)
        counts = np.bincount(draws, minlength=task.size)
        post = {}
        for cell in agents.partitions[i].cells:
            n = int(sum(counts[s] for s in cell))
            if n:
                post[cell] = BeliefDistribution(tuple(Fraction(int(counts[s]), n) if s in cell else Fraction(0) for s in range(task.size)))
        posts.append(post)
    res = construct_common_prior(agents.partitions, TypeProfile(tuple(posts)), tolerance=tolerance)
    return res.prior if res.feasible else None


def run_bounded_agreement(
    tasks: Sequence[TaskSpec],
    graph: CommGraph,
    cost_model: CostModel,
    B: int,
    alpha,
    seed: int,
    *,
    R: int = 3,
    R_agree: int = 3,
    max_epochs: int = 8,
    shared_tree_seed: bool = False,
    sample_accuracy=None,
    budget: int = DEFAULT_NODE_BUDGET,
    true_state: int | None = None,
    strict_branching: bool = False,
) -> BoundedRun:
    """Bounded agents: find a common prior, build it from samples, then agree on it.

    Each epoch builds fresh trees of height ``R`` and exchanges ``R - 1``
    smoothed-channel messages along the spanning schedule. A message the
    sender finds gamma-likely (gamma = alpha) but the receiver finds at most
    gamma/2-likely is a surprise: the receiver splits its cells by which states
    could have produced it. After every epoch the agents try to assemble a
    common prior from fresh unconditional samples; once one is found, fresh
    trees drawn from it carry the agreement phase.
    """
    if not tasks:
        raise ValueError("at least one task is required")
    if R < 2 or R_agree < 2:
        raise ParameterOutOfRange("trees need height >= 2 to carry a message")
    alpha = to_fraction(alpha)
    schedule = build_spanning_schedule(graph)
    ledger = CostLedger()
    transcripts, outcomes = [], []
    for j, task in enumerate(tasks):
        if task.n_agents != graph.n_agents or cost_model.n_agents != graph.n_agents:
            raise ValueError("agent counts differ between task, graph and cost model")
        eps = task.epsilon
        if not (eps / 50 <= alpha <= eps / 40):
            raise ParameterOutOfRange(f"alpha={alpha} outside [eps/50, eps/40]")
        reach = B if strict_branching else B**R
        if reach * alpha < 1:
            raise ParameterOutOfRange("branching too small for the noise width")
        channel = ChannelSpec.smoothed_for(eps, alpha)
        gamma = float(channel.alpha)
        L = channel.half_width

        root = np.random.SeedSequence([int(seed), j])
        state_ss, noise_ss, cp_ss, tree_ss = root.spawn(4)
        noise_rng = np.random.default_rng(noise_ss)
        if shared_tree_seed:
            tree_rngs = [np.random.default_rng(tree_ss) for _ in range(task.n_agents)]
            cp_rngs = [np.random.default_rng(cp_ss) for _ in range(task.n_agents)]
        else:
            tree_rngs = [np.random.default_rng(s) for s in tree_ss.spawn(task.n_agents)]
            cp_rngs = [np.random.default_rng(s) for s in cp_ss.spawn(task.n_agents)]
        if true_state is None:
            avg = np.mean([_probs(p) for p in task.priors], axis=0)
            truth = int(np.random.default_rng(state_ss).choice(task.size, p=avg / avg.sum()))
        else:
            truth = int(true_state)

        eta = float(eps) / 4 if sample_accuracy is None else float(sample_accuracy)
        delta_prime = float(task.delta) / (3 * task.n_agents * task.size)
        S = required_sample_size(eta, min(delta_prime, 0.999))

        agents = _Agents(task, channel, truth)
        transcript = Transcript(task.space.task_id)
        t = 0
        surprises = refinements = attempts = 0
        builds = {"find_CP": 0, "agree_CP": 0}
        phase_msgs = {"find_CP": 0, "agree_CP": 0}

        def exchange(phase: str) -> None:
            nonlocal t, surprises, refinements
            sender, receiver = schedule.edge_at(t)
            code = int(math.floor(agents.estimate(sender) * agents.scale + 0.5))
            payload = code + smoothed_offset(L, noise_rng)
            p_send = agents.message_probability(sender, payload)
            p_recv = agents.message_probability(receiver, payload)
            entries = [HistoryEntry(sender, payload, agents.encoding_map(k, sender)) for k in range(agents.N)]
            if p_send >= gamma and p_recv <= gamma / 2:
                surprises += 1
                model = entries[receiver].encoding
                dist = [None if e is None else abs(payload - e) for e in model]
                known = [d for d in dist if d is not None]
                # sampled models are coarse: when no state is within L, keep the best explanations
                reach = L if any(d < L for d in known) else (min(known) + 1 if known else 0)
                producible = [d is None or d < reach for d in dist]
                old = agents.partitions[receiver]
                new = refine_by_function(old, producible)
                if len(new) > len(old):
                    refinements += len(new) - len(old)
                    agents.partitions[receiver] = new
            for k in range(agents.N):
                agents.histories[k].append(entries[k])
            t += 1
            phase_msgs[phase] += 1
            transcript.messages.append(
                Message(t, sender, receiver, task.space.task_id, Fraction(payload, agents.scale), channel.bits, "smoothed")
            )

        def build_all(height: int, phase: str, priors=None) -> None:
            active = [schedule.edge_at(t + k)[0] for k in range(height)]
            trees = []
            for i in range(agents.N):
                tree, _ = build_sampling_tree(
                    task, active, B, height, cost_model, tree_rngs[i],
                    owner=i, priors=priors, ledger=ledger, phase=phase, budget=budget,
                )
                trees.append(tree)
            builds[phase] += agents.N
            agents.reset_trees(trees)

        cp = _estimate_common_prior(agents, cp_rngs, S, eta, cost_model, ledger)
        attempts += 1
        rounds_to_cp = 0 if cp is not None else None
        epochs = 0
        while cp is None and epochs < max_epochs:
            build_all(R, "find_CP")
            for _ in range(R - 1):
                exchange("find_CP")
            epochs += 1
            cp = _estimate_common_prior(agents, cp_rngs, S, eta, cost_model, ledger)
            attempts += 1
            if cp is not None:
                rounds_to_cp = t

        agreed = False
        if cp is not None:
            epochs = 0
            while epochs < max_epochs:
                build_all(R_agree, "agree_CP", priors=[cp] * agents.N)
                for _ in range(R_agree - 1):
                    if check_agreement([agents.estimate(i) for i in range(agents.N)], float(eps)):
                        agreed = True
                        break
                    exchange("agree_CP")
                if agreed:
                    break
                epochs += 1
        estimates = tuple(agents.estimate(i) for i in range(agents.N)) if agents.trees else ()
        if not agents.trees:
            # no tree was ever needed: build one agreement tree to read off the estimates
            build_all(R_agree, "agree_CP", priors=[cp] * agents.N if cp is not None else None)
            estimates = tuple(agents.estimate(i) for i in range(agents.N))
        agreed = agreed or check_agreement(estimates, float(eps))

        transcripts.append(transcript)
        outcomes.append(
            BoundedOutcome(
                task=task.space.task_id,
                true_state=truth,
                agreed=agreed,
                estimates=estimates,
                messages=t,
                phase_messages=dict(phase_msgs),
                surprises=surprises,
                refinements=refinements,
                degenerate=agents.degenerate,
                common_prior_found=cp is not None,
                rounds_to_common_prior=rounds_to_cp,
                cp_attempts=attempts,
                samples_per_attempt=S,
                tree_builds=dict(builds),
                nodes_per_tree={"find_CP": tree_node_count(B, R), "agree_CP": tree_node_count(B, R_agree)},
                bits=transcript.total_bits,
            )
        )
    return BoundedRun(transcripts, outcomes, ledger)


def expected_ledger_counts(run: BoundedRun, cost_model: CostModel) -> CostLedger:
    """Rebuild the ledger from the run's structural counts alone."""
    out = CostLedger()
    for o in run.outcomes:
        for phase in ("find_CP", "agree_CP"):
            per_agent = o.tree_builds[phase] // cost_model.n_agents
            for i in range(cost_model.n_agents):
                n = per_agent * o.nodes_per_tree[phase]
                out.charge(phase, cost_model.agent_class(i), samples=n, evals=n)
        for i in range(cost_model.n_agents):
            out.charge("construct_CP", cost_model.agent_class(i), samples=o.cp_attempts * o.samples_per_attempt)
    return out


# ---------------------------------------------------------------------------
# needle experiment


@dataclass(frozen=True)
class NeedleResult:
    nu: Fraction
    leaves: int
    trials: int
    misses: int
    miss_frequency: float
    ci_low: float
    ci_high: float
    closed_form: float
    large_error_frequency: float


def simulate_needle(task: TaskSpec, leaves: int, trials: int, seed: int, *, aware_agent: int = 1) -> NeedleResult:
    """First-message estimate of the aware agent from a one-level tree of ``leaves`` draws.

    A miss is a tree without the rare state 0; then the estimate is 0 and its
    error is at least half the rare state's mass.
    """
    if leaves < 1 or trials < 1:
        raise ParameterOutOfRange("need leaves >= 1 and trials >= 1")
    nu = 2 * task.priors[aware_agent][0]
    target = float(nu) / 2
    cm = CostModel(n_agents=max(task.n_agents, 2))
    misses = large = 0
    for k in range(trials):
        rng = np.random.default_rng(trial_seed(seed, k))
        if leaves >= 2:
            tree, _ = build_sampling_tree(task, [aware_agent], leaves, 1, cm, rng, owner=aware_agent)
            counts = tree.counts[0]
        else:
            counts = rng.multinomial(1, _probs(task.priors[aware_agent]))
        est = float(counts[0]) / leaves
        misses += int(counts[0] == 0)
        large += int(abs(est - target) >= 4 * float(task.epsilon) - 1e-15)
    lo, hi = wilson_interval(misses, trials)
    return NeedleResult(
        nu, leaves, trials, misses, misses / trials, lo, hi, float((1 - nu / 2) ** leaves), large / trials
    )


# ---------------------------------------------------------------------------
# transcript distance between bounded and exact agents

Protocol = Callable[[np.random.Generator], tuple[int, tuple]]


def exact_discretized_protocol(task: TaskSpec, graph: CommGraph, messages: int) -> Protocol:
    """Exact Bayesian agents on the discretized channel; returns (state, payloads).

    The channel is noiseless, so each state's transcript is computed once.
    """
    schedule = build_spanning_schedule(graph)
    avg = np.mean([_probs(p) for p in task.priors], axis=0)
    table = []
    for s in range(task.size):
        cfg = RunConfig(
            max_rounds=messages, stall_detection=False, construct_prior=False, record_snapshots=False, true_state=s
        )
        tr, _ = run_task(task, schedule, ChannelSpec.discretized(), np.random.default_rng(0), cfg)
        table.append(tuple(m.payload for m in tr.messages))

    def run(rng: np.random.Generator) -> tuple[int, tuple]:
        truth = int(rng.choice(task.size, p=avg))
        return truth, table[truth]

    return run


def _float_bucket(e: float, m: float, eps: float) -> str:
    if e > m + eps / 4:
        return HIGH
    if e < m - eps / 4:
        return LOW
    return MEDIUM


def bounded_discretized_protocol(task: TaskSpec, graph: CommGraph, messages: int, B: int) -> Protocol:
    """Discretized-channel agents that estimate from ``B`` unconditional draws per prior.

    Each listener holds its own draws from every agent's prior and refines by
    the sender's bucket map as modeled from those draws. The mediator is exact.
    """
    schedule = build_spanning_schedule(graph)
    D, N = task.size, task.n_agents
    f = np.array([float(v) for v in task.objective.values])
    avg = np.mean([_probs(p) for p in task.priors], axis=0)
    probs = [_probs(p) for p in task.priors]
    eps = float(task.epsilon)

    def cell_mean(weights: np.ndarray, cell) -> float | None:
        idx = list(cell)
        n = weights[idx].sum()
        return None if n <= 0 else float((weights[idx] * f[idx]).sum() / n)

    def run(rng: np.random.Generator) -> tuple[int, tuple]:
        truth = int(rng.choice(D, p=avg))
        # draws[k][i]: listener k's draws from agent i's prior
        draws = [[rng.multinomial(B, probs[i]) for i in range(N)] for _ in range(N)]
        parts = list(task.partitions)
        med = KnowledgePartition.trivial(D)
        payloads = []

        def bucket_map(owner: int, agent: int) -> list:
            out = []
            for s in range(D):
                e = cell_mean(draws[owner][agent], parts[agent].cell_of(s))
                m = cell_mean(avg, med.cell_of(s))
                out.append(None if e is None or m is None else _float_bucket(e, m, eps))
            return out

        for t in range(messages):
            vals = []
            for i in range(N):
                v = cell_mean(draws[i][i], parts[i].cell_of(truth))
                vals.append(cell_mean(draws[i][i], range(D)) if v is None else v)
            if max(vals) - min(vals) <= eps:
                break
            sender, _ = schedule.edge_at(t)
            maps = [bucket_map(k, sender) for k in range(N)]
            payloads.append(maps[sender][truth])
            parts = [refine_by_function(parts[k], maps[k]) for k in range(N)]
            med = refine_by_function(med, maps[sender])
        return truth, tuple(payloads)

    return run


@dataclass(frozen=True)
class TranscriptDistance:
    distance: float
    ci_low: float
    ci_high: float
    family_size: int
    lower_bound: bool = True


def _prefixes(seq: tuple) -> list[tuple]:
    return [seq[:k] for k in range(len(seq) + 1)]


def transcript_statistical_distance(
    task: TaskSpec,
    protocol_a: Protocol,
    protocol_b: Protocol,
    trials: int,
    predicates: Literal["atomic", "constants"] | Sequence[Callable[[int, tuple], bool]] = "atomic",
    seed: int = 0,
    *,
    max_messages: int = 4,
    confidence: float = 0.95,
) -> TranscriptDistance:
    """Largest gap in Pr[phi(state, transcript)] over a finite predicate family.

    ``atomic`` uses every indicator [state = x and transcript starts with p].
    Any finite family gives a lower bound on the distance over all tests.
    Trial ``k`` of both protocols uses the same seed stream.
    """
    if task.size > 4 or max_messages > 4:
        raise InstanceTooLarge("transcript distance is limited to D <= 4 and at most 4 messages")
    if trials < 1:
        raise ParameterOutOfRange("trials must be positive")
    runs_a = [protocol_a(np.random.default_rng(trial_seed(seed, k))) for k in range(trials)]
    runs_b = [protocol_b(np.random.default_rng(trial_seed(seed, k))) for k in range(trials)]
    if predicates == "constants":
        family = 2
        gap = 0.0
    elif predicates == "atomic":
        ca: Counter = Counter()
        cb: Counter = Counter()
        for s, tr in runs_a:
            ca.update((s, p) for p in _prefixes(tr))
        for s, tr in runs_b:
            cb.update((s, p) for p in _prefixes(tr))
        keys = set(ca) | set(cb)
        family = len(keys)
        gap = max((abs(ca[k] - cb[k]) / trials for k in keys), default=0.0)
    else:
        family = len(predicates)
        gap = 0.0
        for phi in predicates:
            pa = sum(bool(phi(s, tr)) for s, tr in runs_a) / trials
            pb = sum(bool(phi(s, tr)) for s, tr in runs_b) / trials
            gap = max(gap, abs(pa - pb))
    # Hoeffding with a union bound over the family and both protocols
    half = 2 * math.sqrt(math.log(4 * max(family, 1) / (1 - confidence)) / (2 * trials))
    return TranscriptDistance(gap, max(0.0, gap - half), min(1.0, gap + half), family)


__all__ = [
    "BoundedOutcome",
    "BoundedRun",
    "CostLedger",
    "CostModel",
    "DEFAULT_NODE_BUDGET",
    "HistoryEntry",
    "NeedleResult",
    "SamplingTree",
    "TranscriptDistance",
    "WannabeParams",
    "bounded_discretized_protocol",
    "build_sampling_tree",
    "exact_discretized_protocol",
    "expected_ledger_counts",
    "history_weights",
    "message_likelihood",
    "required_sample_size",
    "run_bounded_agreement",
    "simulate_needle",
    "transcript_statistical_distance",
    "tree_expectation",
    "tree_node_count",
    "triangular_weights",
    "wannabe_params",
]
