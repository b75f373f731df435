"""Acceptance suite: one test per criterion, each printing a pass/fail line."""
from __future__ import annotations

import itertools
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from agreelab.bounded import (
    CostModel,
    build_sampling_tree,
    expected_ledger_counts,
    run_bounded_agreement,
    simulate_needle,
    tree_node_count,
    wannabe_params,
)
from agreelab.core import BeliefDistribution, KnowledgePartition, TypeProfile, posterior_tv_distance, prior_distance
from agreelab.experiments import fit_inverse_square, random_partition, random_profile, random_task
from agreelab.instances import (
    asymptotic_envelope,
    canonical_chain_gap,
    counting_bound,
    es_lipschitz_bound,
    expected_shortfall_bernoulli,
    expected_shortfall_general,
    expected_shortfall_tail,
    gen_needle_priors,
    gen_sum_instance,
    gen_type1_priors,
    gen_uniform_slope_priors,
    optimal_t_bit_agreement,
    slope_ratio,
)
from agreelab.prior_lp import brute_force_common_prior, construct_common_prior, size_condition_holds
from agreelab.protocol import (
    BUCKETS,
    ChannelSpec,
    CommGraph,
    RunConfig,
    bbf_likelihood,
    build_spanning_schedule,
    run_task,
    trial_seed,
)


def all_partitions(D: int) -> list[KnowledgePartition]:
    """Every set partition of range(D) via restricted growth strings."""
    out = []

    def grow(prefix: list[int], top: int):
        if len(prefix) == D:
            out.append(KnowledgePartition.from_labels(prefix))
            return
        for lab in range(top + 2):
            grow(prefix + [lab], max(top, lab))

    grow([0], 0)
    return out


def test_c01_common_prior_oracle_equivalence(criterion):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    mismatches = checked = 0
    for D in range(1, 5):
        parts = all_partitions(D)
        for N in range(1, 4):
            # status is symmetric in the agents, so multisets cover every ordered tuple
            for combo in itertools.combinations_with_replacement(range(len(parts)), N):
                ps = [parts[k] for k in combo]
                for _ in range(100):
                    prof = random_profile(rng, ps)
                    a = construct_common_prior(ps, prof)
                    b = brute_force_common_prior(ps, prof)
                    checked += 1
                    mismatches += a.status != b.status
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 300
    criterion(1, ok, f"{checked} instances, {mismatches} status mismatches, {elapsed:.1f}s (limit 300s)")
    assert ok


def test_c02_size_condition_sufficiency(criterion):
    rng = np.random.default_rng(7)
    hits = feasible = 0
    while hits < 10_000:
        N = int(rng.integers(2, 4))
        D = int(rng.integers(2, 9))
        parts = [random_partition(rng, D) for _ in range(N)]
        if not size_condition_holds(parts):
            continue
        hits += 1
        feasible += construct_common_prior(parts, random_profile(rng, parts, zero_rate=0)).feasible
    ok = feasible == hits
    criterion(2, ok, f"feasible on {feasible}/{hits} instances meeting the size condition")
    assert ok


def test_c03_refinement_cadence(criterion):
    runs = violations = 0
    for family in ("shared_prior", "identifying"):
        for N in (2, 3, 4):
            schedule = build_spanning_schedule(CommGraph.complete(N))
            window = 2 * 2 * (N - 1)
            for k in range(100):
                rng = np.random.default_rng(trial_seed(3, N, k, family == "identifying"))
                D = int(rng.integers(2, 17))
                task = random_task(rng, N, D, Fraction(1, 20), Fraction(1, 10), family)
                _, out = run_task(task, schedule, ChannelSpec.continuous(), rng, RunConfig(record_snapshots=False))
                runs += 1
                refined = set(out.refinement_rounds)
                stalled_before_agreement = out.stalled and not out.agreed
                gap = any(
                    not any(r in refined for r in range(s, s + window)) for s in range(1, out.rounds - window + 2)
                )
                violations += gap or stalled_before_agreement
    ok = runs >= 500 and violations == 0
    criterion(3, ok, f"{runs} continuous runs, {violations} windows without a proper refinement")
    assert ok


def test_c04_inverse_square_scaling(criterion):
    schedule = build_spanning_schedule(CommGraph.complete(2))
    delta = Fraction(1, 10)
    grid = (Fraction(1, 5), Fraction(1, 10), Fraction(1, 20))
    medians = []
    for eps in grid:
        rounds = []
        for k in range(200):
            rng = np.random.default_rng(trial_seed(11, k))
            task = random_task(rng, 2, 32, eps, delta, "shared_prior")
            _, out = run_task(task, schedule, ChannelSpec.smoothed_for(eps), rng, RunConfig(record_snapshots=False))
            rounds.append(out.rounds)
        medians.append(float(np.median(rounds)))
    fit = fit_inverse_square([float(e) for e in grid], medians, float(delta))
    monotone = all(a <= b for a, b in zip(medians, medians[1:]))
    ok = monotone and fit["max_ratio"] <= 2.0
    criterion(
        4, ok, f"median rounds {medians} for eps {[float(e) for e in grid]}; c={fit['c']:.3g}, "
        f"worst cell/fit ratio {fit['max_ratio']:.2f} (limit 2)"
    )
    assert ok


def test_c05_discretized_matches_continuous(criterion):
    schedule = build_spanning_schedule(CommGraph.complete(2))
    same = 0
    bits_ok = True
    r_cont, r_disc = [], []
    for k in range(100):
        outs = []
        for channel in (ChannelSpec.continuous(), ChannelSpec.discretized()):
            rng = np.random.default_rng(trial_seed(5, k))
            task = random_task(rng, 2, 8, Fraction(1, 10), Fraction(1, 10), "identifying")
            outs.append(run_task(task, schedule, channel, rng, RunConfig(record_snapshots=False)))
        (_, oc), (tr, od) = outs
        same += oc.agreed == od.agreed
        bits_ok &= all(m.bit_cost == 2 for m in tr.messages)
        r_cont.append(oc.rounds)
        r_disc.append(od.rounds)
    mc, md = float(np.median(r_cont)), float(np.median(r_disc))
    ok = same == 100 and bits_ok and md <= 3 * max(mc, 1)
    criterion(5, ok, f"status match {same}/100, all messages 2 bits: {bits_ok}, median rounds {md} vs {mc}")
    assert ok


def test_c06_bbf_properties(criterion):
    theta = Fraction(1, 5)
    ratios = [
        bbf_likelihood(c, b, theta) / bbf_likelihood(c, b2, theta) for c in BUCKETS for b in BUCKETS for b2 in BUCKETS
    ]
    ratio_ok = all(Fraction(1, 3) <= r <= 3 for r in ratios)
    schedule = build_spanning_schedule(CommGraph.complete(2))
    channel = ChannelSpec.bbf(theta)
    violations = steps = 0
    for k in range(100):
        rng = np.random.default_rng(trial_seed(6, k))
        task = random_task(rng, 2, 6, Fraction(1, 8), Fraction(1, 4), "heterogeneous")
        task = type(task)(task.space, task.objective, task.priors, task.epsilon, task.delta)
        tr, out = run_task(task, schedule, channel, rng, RunConfig(max_rounds=40, record_snapshots=False))
        chain = list(range(task.size))
        logs = [np.log([float(x) for x in p.mass]) for p in task.priors]
        gap = canonical_chain_gap(np.exp(logs[0]), np.exp(logs[1]), chain)
        for m in tr.messages:
            lik = np.log([float(x) for x in m.likelihood])
            logs = [lg + lik for lg in logs]
            new = canonical_chain_gap(np.exp(logs[0] - logs[0].max()), np.exp(logs[1] - logs[1].max()), chain)
            steps += 1
            violations += abs(new - gap) > 2 * m.bit_cost * math.log(3) + 1e-9
            gap = new
    ok = ratio_ok and violations == 0
    criterion(6, ok, f"ratios in [1/3, 3]: {ratio_ok}; {steps} gap increments, {violations} above 2 b log 3")
    assert ok


def test_c07_counting_bound(criterion):
    bound_violations = cells = 0
    envelope_misses = []
    for n in range(4, 9):
        for t in range(0, 4):
            for k in range(3, n + 2):
                eps = Fraction(1, 2**k)
                value = optimal_t_bit_agreement(n, t, eps)
                cells += 1
                bound_violations += value > counting_bound(n, t, eps)
                env = asymptotic_envelope(t, eps)
                if 2 * eps * 2 ** (n + 1) >= 8 and env < 1:
                    rel = abs(value - env) / env
                    if rel > Fraction(1, 4):
                        envelope_misses.append((n, t, k, float(rel)))
    ok = bound_violations == 0 and not envelope_misses
    worst = max((m[3] for m in envelope_misses), default=0.0)
    criterion(
        7, ok, f"{cells} cells, {bound_violations} above the counting bound; {len(envelope_misses)} cells off the "
        f"2 eps 2^t envelope by more than 25% (worst {worst:.2f})"
    )
    assert ok


def test_c08_needle(criterion):
    nu = Fraction(1, 2)
    task = gen_needle_priors(3, nu).tasks[0]
    base = simulate_needle(task, 3, 10_000, seed=8)
    matches = abs(base.miss_frequency - 0.4219) <= 0.02
    short = [simulate_needle(task, L, 10_000, seed=80 + L) for L in range(1, 3) if L < 3 / (2 * nu)]
    long_L = math.ceil(2 / nu * math.log(4))
    long = [simulate_needle(task, L, 10_000, seed=90 + L) for L in (long_L, long_L + 2)]
    ok = matches and all(r.miss_frequency > 0.25 for r in short) and all(r.miss_frequency < 0.25 for r in long)
    criterion(
        8, ok, f"L=3 miss {base.miss_frequency:.4f} (target 0.4219 +/- 0.02); short L "
        f"{[(r.leaves, r.miss_frequency) for r in short]}; long L {[(r.leaves, r.miss_frequency) for r in long]}"
    )
    assert ok


def test_c09_tail_risk(criterion):
    exact = expected_shortfall_bernoulli(Fraction(1, 10), Fraction(1, 5)) == Fraction(1, 2)
    rng = np.random.default_rng(9)
    worst = 0.0
    lip_violations = 0
    for _ in range(1000):
        k = int(rng.integers(1, 21))
        vals = rng.random(k)
        probs = rng.dirichlet(np.ones(k))
        tau = float(rng.uniform(0.01, 1))
        worst = max(worst, abs(expected_shortfall_general(vals, probs, tau) - expected_shortfall_tail(vals, probs, tau)))
        k2 = int(rng.integers(1, 21))
        vals2, probs2 = rng.random(k2), rng.dirichlet(np.ones(k2))
        gap = abs(expected_shortfall_general(vals, probs, tau) - expected_shortfall_general(vals2, probs2, tau))
        lip_violations += gap > es_lipschitz_bound(vals, probs, vals2, probs2, tau) + 1e-12
    ok = exact and worst <= 1e-9 and lip_violations == 0
    criterion(9, ok, f"Bernoulli ES exact: {exact}; max general/tail gap {worst:.2e}; {lip_violations} bound violations")
    assert ok


def test_c10_paper_constants(criterion):
    w = wannabe_params(1, 2, Fraction(1, 2), Fraction(1, 2), Fraction(1, 2), Fraction(1, 100))
    got = (w.run_coefficient, w.rho_coefficient, w.base)
    ok = got == (1_528_823_808, 2304, 1100) and w.run_coefficient == 729 * 2**21 and w.rho_coefficient == 18 * 2**7
    criterion(10, ok, f"coefficients {got[0]}, {got[1]}, base {got[2]}")
    assert ok


def test_c11_hard_instance_golden_values(criterion):
    problems = []
    nu = Fraction(1, 2)
    for D in range(3, 9):
        inst = gen_type1_priors(2, D, nu, Fraction(1, 8))
        p, q = inst.tasks[0].priors
        if prior_distance(p, q) != nu or posterior_tv_distance(p, q) != nu / 2:
            problems.append(("type1", D))
        slope = gen_uniform_slope_priors(D, 1)
        up, down = slope.tasks[0].priors
        L0 = canonical_chain_gap(up, down, list(range(D)))
        if abs(L0 - 2 * (D - 1) * math.log(3)) > 1e-12:
            problems.append(("slope", D, L0))
    if slope_ratio(1) != 3:
        problems.append(("lambda",))
    for n in (1, 2):
        inst = gen_sum_instance(3, 2, n)
        images = []
        for task, scale in zip(inst.tasks, inst.metadata["scales"]):
            raw = [v * scale for v in task.objective.values]
            images.append((min(raw), max(raw)))
        for (a_lo, a_hi), (b_lo, b_hi) in zip(images, images[1:]):
            if not a_hi < b_lo:
                problems.append(("sum", n))
    ok = not problems
    criterion(11, ok, f"type-I, uniform-slope and sum images on D=3..8: {problems or 'all exact'}")
    assert ok


def test_c12_bounded_agents(criterion):
    cm = CostModel(q=1, n_agents=2)
    graph = CommGraph.complete(2)
    agreed = ledger_ok = 0
    for seed in range(100):
        rng = np.random.default_rng(trial_seed(12, seed))
        task = random_task(rng, 2, 4, Fraction(1, 2), Fraction(1, 2), "heterogeneous")
        task = type(task)(
            task.space, task.objective, task.priors, task.epsilon, task.delta,
            (KnowledgePartition.from_labels([0, 0, 1, 1]), KnowledgePartition.from_labels([0, 1, 0, 1])),
        )
        run = run_bounded_agreement([task], graph, cm, 64, Fraction(1, 80), seed)
        agreed += run.outcomes[0].agreed
        ledger_ok += run.ledger.as_dict() == expected_ledger_counts(run, cm).as_dict()
    shapes_ok = True
    for B, R in [(2, 1), (2, 3), (3, 1), (3, 4), (5, 2), (7, 3)]:
        tree, _ = build_sampling_tree(random_task(np.random.default_rng(B), 2, 4, Fraction(1, 2), Fraction(1, 2)),
                                      [0] * R, B, R, cm, np.random.default_rng(R))
        shapes_ok &= tree.node_count == tree_node_count(B, R) == (B ** (R + 1) - 1) // (B - 1) - 1
    ok = agreed >= 90 and ledger_ok == 100 and shapes_ok
    criterion(12, ok, f"agreement {agreed}/100 (need 90); ledger exact {ledger_ok}/100; node counts exact: {shapes_ok}")
    assert ok
