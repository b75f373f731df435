"""Hard-instance generators, their analytic quantities and tail-risk measures."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import product
from typing import Sequence

import numpy as np
from scipy.ndimage import maximum_filter1d

from .core import (
    BeliefDistribution,
    KnowledgePartition,
    Objective,
    StateSpace,
    TaskSpec,
    to_fraction,
)
from .errors import InstanceTooLarge, ParameterOutOfRange, ZeroPosteriorOnChain


@dataclass(frozen=True)
class HardInstance:
    kind: str
    tasks: tuple[TaskSpec, ...]
    metadata: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# sum instance and the two-agent counting bound


def sum_image_interval(N: int, n: int, j: int) -> tuple[Fraction, Fraction]:
    """Interval containing every value of the task-``j`` sum objective."""
    return Fraction(N * (j - 1), 2) + Fraction(1, 2 ** (n + 1)), Fraction(N * j, 2)


def gen_sum_instance(
    M: int,
    N: int,
    n: int,
    *,
    cap: int = 2**16,
    materialize: bool = True,
    epsilon=None,
    delta=Fraction(1, 4),
) -> HardInstance:
    """Tasks whose state is one private integer per agent.

    Agent ``i`` holds ``x_i`` in ``{(j-1) 2^n + 1, ..., j 2^n}`` and knows only its
    own coordinate; the raw objective is ``sum(x) / 2^(n+1)``. When that raw
    value can exceed 1 the stored objective is divided by ``N j / 2`` and the
    divisor is recorded as ``scale``. With ``materialize=False`` only the
    per-agent value ranges (the two-agent projection) are returned.
    """
    if n < 1 or M < 1 or N < 1:
        raise ParameterOutOfRange("need n >= 1, M >= 1, N >= 1")
    width = 2**n
    eps = Fraction(1, 2 ** (n + 1)) if epsilon is None else to_fraction(epsilon)
    tasks = []
    meta = {"N": N, "n": n, "M": M, "images": [], "value_ranges": [], "scales": []}
    for j in range(1, M + 1):
        lo, hi = (j - 1) * width + 1, j * width
        meta["value_ranges"].append((lo, hi))
        meta["images"].append(sum_image_interval(N, n, j))
        scale = max(Fraction(1), Fraction(N * j, 2))
        meta["scales"].append(scale)
        if not materialize:
            continue
        if width**N > cap:
            raise InstanceTooLarge(f"(2^n)^N = {width ** N} states exceeds cap {cap}")
        tuples = list(product(range(lo, hi + 1), repeat=N))
        raw = [Fraction(sum(x), 2 ** (n + 1)) for x in tuples]
        space = StateSpace(j - 1, len(tuples), tuple(tuples))
        prior = BeliefDistribution.uniform(len(tuples))
        parts = tuple(KnowledgePartition.from_labels([x[i] for x in tuples]) for i in range(N))
        tasks.append(
            TaskSpec(space, Objective(tuple(v / scale for v in raw)), (prior,) * N, eps, to_fraction(delta), parts)
        )
    return HardInstance("sum", tuple(tasks), meta)


def _window_capacity(n: int, epsilon: Fraction) -> int:
    """Most integers an estimate can be within ``epsilon`` of, in f units 2^-(n+1)."""
    return math.floor(2 * to_fraction(epsilon) * 2 ** (n + 1)) + 1


def _trailing_max(h: np.ndarray, size: int) -> np.ndarray:
    """out[e] = max(h[e-size+1 .. e]) with -inf outside the array."""
    padded = np.concatenate([np.full(size, -np.inf), h])
    filt = maximum_filter1d(padded, size=size, mode="constant", cval=-np.inf)
    return filt[size - (size - 1) // 2 : size - (size - 1) // 2 + len(h)]


def optimal_t_bit_agreement(n: int, t: int, epsilon) -> Fraction:
    """Best agreement probability of a ``t``-bit message about a uniform ``n``-bit value.

    The receiver picks an estimate per message class; a value agrees when it is
    within ``epsilon`` of the estimate in objective units of ``2^-(n+1)``. A class
    of ``l`` consecutive values agrees on at most ``min(l, K)`` of them, where ``K``
    counts the integers in a window of width ``2 eps 2^(n+1)``. Dynamic
    programming over contiguous classes finds the best split into at most
    ``2^t`` intervals.
    """
    if n > 12 or n < 0:
        raise InstanceTooLarge("optimal_t_bit_agreement supports 0 <= n <= 12")
    if not 0 <= t <= n:
        raise ParameterOutOfRange("need 0 <= t <= n")
    V = 2**n
    K = _window_capacity(n, epsilon)
    classes = min(2**t, V)
    idx = np.arange(V + 1, dtype=float)
    prev = np.full(V + 1, -np.inf)
    prev[0] = 0.0
    best = 0.0
    for _ in range(classes):
        new = np.full(V + 1, -np.inf)
        if K <= V:
            pm = np.maximum.accumulate(prev)
            new[K:] = pm[: V + 1 - K] + K
        if K > 1:
            window = _trailing_max(prev - idx, K - 1)
            new[1:] = np.maximum(new[1:], window[:-1] + idx[1:])
        new[0] = 0.0
        prev = np.maximum(prev, new)
        best = max(best, prev[V])
        if best >= V:
            break
    return Fraction(int(round(best)), V)


def counting_bound(n: int, t: int, epsilon) -> Fraction:
    """Finite-size bound min(1, (2 eps 2^(n+1) + 1) 2^t / 2^n)."""
    eps = to_fraction(epsilon)
    return min(Fraction(1), (2 * eps * 2 ** (n + 1) + 1) * Fraction(2**t, 2**n))


def asymptotic_envelope(t: int, epsilon) -> Fraction:
    """The large-range envelope 2 eps 2^t."""
    return 2 * to_fraction(epsilon) * 2**t


def brute_force_t_bit_agreement(n: int, t: int, epsilon) -> Fraction:
    """Enumerate every assignment of the 2^n values to 2^t classes (tiny n only)."""
    V, C = 2**n, 2**t
    if C**V > 2**20:
        raise InstanceTooLarge("enumeration limited to 2^20 assignments")
    eps_units = 2 * to_fraction(epsilon) * 2 ** (n + 1)
    best = 0
    for assign in product(range(C), repeat=V):
        total = 0
        for c in range(C):
            members = [v for v in range(V) if assign[v] == c]
            if members:
                # best estimate: the window starting at some member covers the most members
                total += max(sum(1 for w in members if 0 <= w - m <= eps_units) for m in members)
        best = max(best, total)
    return Fraction(best, V)


# ---------------------------------------------------------------------------
# prior families


def type1_prior(D: int, nu, p, sign: int) -> BeliefDistribution:
    nu, p = to_fraction(nu), to_fraction(p)
    beta = p / (D - 2)
    s0 = Fraction(1, 2) - sign * nu / 4 - (D - 2) * beta / 2
    s1 = Fraction(1, 2) + sign * nu / 4 - (D - 2) * beta / 2
    return BeliefDistribution((s0, s1) + (beta,) * (D - 2))


def gen_type1_priors(N: int, D: int, nu, p, *, epsilon=None, delta=Fraction(1, 4)) -> HardInstance:
    """Two-point-shifted priors with half the agents at sign +1.

    The objective is the indicator of ``s1``, so matched-sign agents agree and
    mismatched agents start ``nu/2`` apart. With odd ``N`` the first
    ``floor(N/2)`` agents get the plus sign.
    """
    nu, p = to_fraction(nu), to_fraction(p)
    if D <= 2 or not (0 < nu <= 1) or not (0 < p <= Fraction(1, 2) - nu / 4) or N < 1:
        raise ParameterOutOfRange("need D > 2, 0 < nu <= 1, 0 < p <= 1/2 - nu/4")
    signs = tuple(1 if i < N // 2 else -1 for i in range(N))
    priors = tuple(type1_prior(D, nu, p, b) for b in signs)
    f = Objective(tuple(Fraction(int(s == 1)) for s in range(D)))
    eps = nu / 4 if epsilon is None else to_fraction(epsilon)
    task = TaskSpec(StateSpace(0, D), f, priors, eps, to_fraction(delta))
    meta = {"nu": nu, "p": p, "beta": p / (D - 2), "signs": signs, "l1_mismatched": nu, "tv_mismatched": nu / 2}
    return HardInstance("type1", (task,), meta)


def slope_ratio(nu) -> Fraction:
    nu = to_fraction(nu)
    return (1 + nu / 2) / (1 - nu / 2)


def gen_uniform_slope_priors(D: int, nu, *, epsilon=None, delta=Fraction(1, 4)) -> HardInstance:
    """Two geometric priors sloping in opposite directions with ratio lambda."""
    nu = to_fraction(nu)
    if D <= 2 or not (0 < nu <= 1):
        raise ParameterOutOfRange("need D > 2 and 0 < nu <= 1")
    lam = slope_ratio(nu)
    up = BeliefDistribution.from_weights([lam**m for m in range(D)])
    down = BeliefDistribution.from_weights([lam ** (-m) for m in range(D)])
    f = Objective(tuple(Fraction(m, D - 1) for m in range(D)))
    eps = nu / 4 if epsilon is None else to_fraction(epsilon)
    task = TaskSpec(StateSpace(0, D), f, (up, down), eps, to_fraction(delta))
    meta = {
        "nu": nu,
        "lambda": lam,
        "chain": tuple(range(D)),
        "initial_gap": 2 * (D - 1) * math.log(lam.numerator / lam.denominator),
    }
    return HardInstance("uniform_slope", (task,), meta)


def _log(x) -> float:
    x = to_fraction(x) if not isinstance(x, float) else x
    if isinstance(x, Fraction):
        return math.log(x.numerator) - math.log(x.denominator)
    return math.log(x)


def chain_log_ratio(posterior, chain: Sequence[int]) -> float:
    mass = posterior.mass if isinstance(posterior, BeliefDistribution) else posterior
    total = 0.0
    for a, b in zip(chain, chain[1:]):
        if mass[a] <= 0 or mass[b] <= 0:
            raise ZeroPosteriorOnChain(f"zero posterior on chain states {a}, {b}")
        total += _log(mass[b]) - _log(mass[a])
    return total


def canonical_chain_gap(posterior_i, posterior_k, chain: Sequence[int]) -> float:
    """|sum of log ratios along the chain for i - the same for k|."""
    return abs(chain_log_ratio(posterior_i, chain) - chain_log_ratio(posterior_k, chain))


def gen_needle_priors(D: int, nu=None) -> HardInstance:
    """Priors that differ only on a rare state ``s0``; default ``nu = 2^-D``."""
    nu = Fraction(1, 2**D) if nu is None else to_fraction(nu)
    if D < 3 or not (0 < nu <= 1):
        raise ParameterOutOfRange("need D >= 3 and 0 < nu <= 1")
    blind = BeliefDistribution((Fraction(0),) + (Fraction(1, D - 1),) * (D - 1))
    aware = BeliefDistribution((nu / 2,) + ((1 - nu / 2) / (D - 1),) * (D - 1))
    f = Objective(tuple(Fraction(int(s == 0)) for s in range(D)))
    task = TaskSpec(StateSpace(0, D), f, (blind, aware), nu / 8, Fraction(1, 4))
    meta = {"nu": nu, "sample_threshold": 3 / (2 * nu), "gap": nu / 2}
    return HardInstance("needle", (task,), meta)


def needle_miss_probability(nu, L: int) -> Fraction:
    """Probability that L draws from the aware prior never hit s0."""
    return (1 - to_fraction(nu) / 2) ** L


# ---------------------------------------------------------------------------
# tail risk


def expected_shortfall_bernoulli(p, tau):
    """ES of a Bernoulli(p) indicator at tail level tau: min(1, p / tau)."""
    if not (0 <= p <= 1) or not (0 < tau <= 1):
        raise ParameterOutOfRange("need 0 <= p <= 1 and 0 < tau <= 1")
    if isinstance(p, float) or isinstance(tau, float):
        p, tau = to_fraction(p), to_fraction(tau)
    return min(Fraction(1) if isinstance(p, Fraction) else 1, p / tau)


def _upper_partial(values, probs, c):
    return sum(q * max(v - c, 0) for v, q in zip(values, probs))


def expected_shortfall_general(values: Sequence, probs: Sequence, tau):
    """Minimize c + E[(X - c)+] / tau over the support plus 0 and 1."""
    if not (0 < tau <= 1):
        raise ParameterOutOfRange("need 0 < tau <= 1")
    candidates = sorted(set(values) | {0, 1})
    return min(c + _upper_partial(values, probs, c) / tau for c in candidates)


def expected_shortfall_tail(values: Sequence, probs: Sequence, tau):
    """Average of the upper tau-tail of the distribution."""
    remaining = tau
    total = 0
    for v, q in sorted(zip(values, probs), key=lambda x: x[0], reverse=True):
        take = min(q, remaining)
        total += take * v
        remaining -= take
        if remaining <= 0:
            break
    return total / tau


def es_lipschitz_bound(values_p, probs_p, values_q, probs_q, tau):
    """(1/tau) * max over c of |E_P (X - c)+ - E_Q (X - c)+|."""
    grid = sorted(set(values_p) | set(values_q) | {0, 1})
    return max(
        abs(_upper_partial(values_p, probs_p, c) - _upper_partial(values_q, probs_q, c)) for c in grid
    ) / tau
