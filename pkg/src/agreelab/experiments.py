"""Seeded experiment harness: configs, random instances, result rows and reports."""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import math
from fractions import Fraction
from pathlib import Path
from statistics import median
from typing import Any, Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from scipy.stats import binom

from .bounded import CostModel, run_bounded_agreement, simulate_needle, DEFAULT_NODE_BUDGET
from .core import (
    BeliefDistribution,
    KnowledgePartition,
    Objective,
    StateSpace,
    TaskSpec,
    TypeProfile,
    join_partitions,
)
from .errors import ConfigInvalid, MissingResults
from .instances import (
    asymptotic_envelope,
    counting_bound,
    expected_shortfall_bernoulli,
    gen_needle_priors,
    optimal_t_bit_agreement,
)
from .prior_lp import brute_force_common_prior, construct_common_prior, size_condition_holds
from .protocol import ChannelSpec, CommGraph, RunConfig, build_spanning_schedule, run_task, trial_seed, wilson_interval

Family = Literal["shared_prior", "heterogeneous", "identifying"]


# ---------------------------------------------------------------------------
# random instances


def random_prior(rng: np.random.Generator, D: int, max_weight: int = 9) -> BeliefDistribution:
    """Full-support prior with integer weights in [1, max_weight]."""
    return BeliefDistribution.from_weights([int(w) for w in rng.integers(1, max_weight + 1, D)])


def random_partition(rng: np.random.Generator, D: int, max_cells: int | None = None) -> KnowledgePartition:
    k = int(rng.integers(1, (max_cells or D) + 1))
    return KnowledgePartition.from_labels([int(x) for x in rng.integers(0, k, D)])


def random_objective(rng: np.random.Generator, D: int, grid: int = 16) -> Objective:
    return Objective(tuple(Fraction(int(v), grid) for v in rng.integers(0, grid + 1, D)))


def make_identifying(parts: Sequence[KnowledgePartition]) -> tuple[KnowledgePartition, ...]:
    """Split the last partition just enough that the join becomes discrete."""
    parts = list(parts)
    join = join_partitions(parts)
    last = parts[-1]
    labels = []
    for s in range(last.size):
        cell = join.cell_of(s)
        labels.append((last.cell_index(s), cell.index(s)))
    parts[-1] = KnowledgePartition.from_labels(labels)
    return tuple(parts)


def random_task(
    rng: np.random.Generator,
    n_agents: int,
    D: int,
    epsilon,
    delta,
    family: Family = "shared_prior",
    max_cells: int | None = None,
    task_id: int = 0,
) -> TaskSpec:
    """Random task from one of three families.

    ``shared_prior``: one prior for all agents, random partitions.
    ``heterogeneous``: independent priors, random partitions.
    ``identifying``: independent priors, partitions whose join is discrete.
    """
    f = random_objective(rng, D)
    if family == "shared_prior":
        p = random_prior(rng, D)
        priors = (p,) * n_agents
    else:
        priors = tuple(random_prior(rng, D) for _ in range(n_agents))
    parts = tuple(random_partition(rng, D, max_cells) for _ in range(n_agents))
    if family == "identifying":
        parts = make_identifying(parts)
    return TaskSpec(StateSpace(task_id, D), f, priors, epsilon, delta, parts)


def random_profile(
    rng: np.random.Generator, parts: Sequence[KnowledgePartition], max_weight: int = 4, zero_rate: float = 0.25
) -> TypeProfile:
    """Independent rational posteriors per cell, with some zero entries."""
    D = parts[0].size
    out = []
    for part in parts:
        post = {}
        for cell in part.cells:
            w = [0] * D
            for s in cell:
                w[s] = 0 if rng.random() < zero_rate else int(rng.integers(1, max_weight + 1))
            if sum(w) == 0:
                w[cell[int(rng.integers(len(cell)))]] = 1
            post[cell] = BeliefDistribution.from_weights(w)
        out.append(post)
    return TypeProfile(tuple(out))


# ---------------------------------------------------------------------------
# configuration


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class InstanceParams(_Strict):
    n_agents: int = Field(2, ge=2, le=8)
    states: int = Field(8, ge=2, le=64)
    epsilon: float = Field(0.1, gt=0, lt=1)
    delta: float = Field(0.1, gt=0, lt=1)
    family: Family = "shared_prior"
    max_cells: int | None = Field(None, ge=1)
    topology: Literal["complete", "ring"] = "complete"


class ChannelParams(_Strict):
    kind: Literal["continuous", "discretized", "bbf_discretized", "smoothed", "quantized"] = "continuous"
    alpha: float | None = Field(None, gt=0, lt=1)
    bits: int | None = Field(None, ge=0, le=62)
    theta: float | None = Field(None, gt=0, le=1 / 3)

    def build(self, epsilon) -> ChannelSpec:
        if self.kind == "continuous":
            return ChannelSpec.continuous()
        if self.kind == "discretized":
            return ChannelSpec.discretized()
        if self.kind == "bbf_discretized":
            return ChannelSpec.bbf(Fraction(1, 5) if self.theta is None else self.theta)
        if self.kind == "quantized":
            return ChannelSpec.quantized(8 if self.bits is None else self.bits)
        if self.bits is not None and self.alpha is not None:
            return ChannelSpec.smoothed(self.alpha, self.bits)
        return ChannelSpec.smoothed_for(epsilon, self.alpha)


class LowerBoundParams(_Strict):
    n: int = Field(6, ge=1, le=24)
    t: int = Field(1, ge=0, le=24)
    epsilon: float = Field(1 / 16, gt=0, le=1)


class TailRiskParams(_Strict):
    p: float = Field(0.1, ge=0, le=1)
    tau: float = Field(0.2, gt=0, le=1)


class NeedleParams(_Strict):
    nu: float = Field(0.5, gt=0, le=1)
    leaves: int = Field(3, ge=1)
    states: int = Field(3, ge=3, le=64)


class BoundedParams(_Strict):
    branching: int = Field(64, ge=2)
    alpha: float | None = Field(None, gt=0, lt=1)
    height: int = Field(3, ge=2)
    agree_height: int = Field(3, ge=2)
    humans: int = Field(1, ge=1)
    max_epochs: int = Field(8, ge=1)
    T_eval_H: float = Field(1.0, ge=0)
    T_eval_AI: float = Field(1.0, ge=0)
    T_sample_H: float = Field(1.0, ge=0)
    T_sample_AI: float = Field(1.0, ge=0)


class PriorParams(_Strict):
    brute_force: bool = True
    tolerance: float = Field(0.0, ge=0)


Kind = Literal["agreement", "construct_prior", "lower_bound", "bounded", "needle", "tail_risk"]


class ExperimentConfig(_Strict):
    """Validated experiment description; ``seed`` is mandatory."""

    kind: Kind
    seed: int = Field(..., ge=0, lt=2**64)
    trials: int = Field(1, ge=1, le=10**7)
    format: Literal["csv", "json"] = "csv"
    out: str | None = None
    budget: int = Field(DEFAULT_NODE_BUDGET, ge=1)
    max_rounds: int | None = Field(None, ge=1)
    instance: InstanceParams = InstanceParams()
    channel: ChannelParams = ChannelParams()
    lower_bound: LowerBoundParams = LowerBoundParams()
    tail_risk: TailRiskParams = TailRiskParams()
    needle: NeedleParams = NeedleParams()
    bounded: BoundedParams = BoundedParams()
    prior: PriorParams = PriorParams()
    grid: dict[str, list[Any]] | None = None

    @field_validator("grid")
    @classmethod
    def _grid_keys(cls, grid):
        if grid is None:
            return grid
        for key, values in grid.items():
            if "." not in key:
                raise ValueError(f"grid key {key!r} must be section.field")
            if not isinstance(values, list) or not values:
                raise ValueError(f"grid axis {key!r} must be a non-empty list")
        return grid

    @model_validator(mode="after")
    def _ranges(self):
        if self.kind == "bounded" and self.bounded.humans >= self.instance.n_agents:
            raise ValueError("bounded.humans must be below instance.n_agents")
        return self


def load_config(source: str | Path | dict) -> ExperimentConfig:
    try:
        if isinstance(source, dict):
            return ExperimentConfig.model_validate(source)
        text = Path(source).read_text()
        return ExperimentConfig.model_validate_json(text)
    except (ValidationError, ValueError, OSError) as exc:
        raise ConfigInvalid(str(exc)) from exc


def dump_config(config: ExperimentConfig) -> str:
    return json.dumps(config.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"


def experiment_id(config: ExperimentConfig) -> str:
    body = config.model_dump(mode="json")
    body.pop("out", None)
    body.pop("format", None)
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# rows


def _num(x) -> Any:
    if isinstance(x, Fraction):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    return x


def _row(exp: str, index: int, params: dict, measures: dict) -> dict:
    row = {"experiment": exp, "index": index}
    row.update({f"param.{k}": _num(v) for k, v in params.items()})
    row.update({k: _num(v) for k, v in measures.items()})
    for k, v in row.items():
        if isinstance(v, (int, float)) and not isinstance(v, bool) and k.endswith(("count", "rounds", "bits")):
            if v < 0:
                raise AssertionError(f"negative count {k}")
    lo, hi, est = row.get("ci_low"), row.get("ci_high"), row.get("estimate")
    if lo is not None and not (lo - 1e-12 <= est <= hi + 1e-12):
        raise AssertionError("confidence interval does not bracket the estimate")
    return row


def _graph(p: InstanceParams) -> CommGraph:
    if p.topology == "ring":
        return CommGraph.ring(p.n_agents)
    return CommGraph.complete(p.n_agents)


def _agreement_rows(cfg: ExperimentConfig, exp: str) -> list[dict]:
    ip = cfg.instance
    schedule = build_spanning_schedule(_graph(ip))
    eps = Fraction(repr(ip.epsilon))
    channel = cfg.channel.build(eps)
    run_cfg = RunConfig(max_rounds=cfg.max_rounds, record_snapshots=False)
    params = {"n_agents": ip.n_agents, "states": ip.states, "epsilon": ip.epsilon, "delta": ip.delta,
              "family": ip.family, "channel": channel.kind}
    rows = []
    for k in range(cfg.trials):
        rng = np.random.default_rng(trial_seed(cfg.seed, k))
        task = random_task(rng, ip.n_agents, ip.states, eps, Fraction(repr(ip.delta)), ip.family, ip.max_cells)
        tr, out = run_task(task, schedule, channel, rng, run_cfg)
        rows.append(_row(exp, k, params, {
            "true_state": out.true_state,
            "agreed": out.agreed,
            "rounds": out.rounds,
            "bits": 0 if out.unbounded_bits else out.bits,
            "unbounded_bits": out.unbounded_bits,
            "stalled": out.stalled,
            "cap_exceeded": out.cap_exceeded,
            "rounds_to_common_prior": -1 if out.rounds_to_common_prior is None else out.rounds_to_common_prior,
            "refinement_count": len(out.refinement_rounds),
            "final_gap": float(max(out.expectations) - min(out.expectations)),
        }))
    return rows


def _prior_rows(cfg: ExperimentConfig, exp: str) -> list[dict]:
    ip = cfg.instance
    params = {"n_agents": ip.n_agents, "states": ip.states, "tolerance": cfg.prior.tolerance}
    rows = []
    for k in range(cfg.trials):
        rng = np.random.default_rng(trial_seed(cfg.seed, k))
        parts = tuple(random_partition(rng, ip.states, ip.max_cells) for _ in range(ip.n_agents))
        profile = random_profile(rng, parts)
        res = construct_common_prior(parts, profile, tolerance=Fraction(repr(cfg.prior.tolerance)))
        brute = ""
        if cfg.prior.brute_force and ip.states <= 6 and ip.n_agents <= 3:
            brute = brute_force_common_prior(parts, profile).status
        rows.append(_row(exp, k, params, {
            "status": res.status,
            "feasible": res.feasible,
            "size_condition": size_condition_holds(parts),
            "brute_status": brute,
            "constraint_count": res.constraint_count,
        }))
    return rows


def _lower_bound_rows(cfg: ExperimentConfig, exp: str) -> list[dict]:
    lb = cfg.lower_bound
    eps = Fraction(repr(lb.epsilon))
    opt = optimal_t_bit_agreement(lb.n, lb.t, eps)
    bound = counting_bound(lb.n, lb.t, eps)
    env = asymptotic_envelope(lb.t, eps)
    return [_row(exp, 0, {"n": lb.n, "t": lb.t, "epsilon": lb.epsilon}, {
        "optimal": float(opt),
        "optimal_exact": str(opt),
        "counting_bound": float(bound),
        "envelope": float(env),
        "within_bound": opt <= bound,
    })]


def _tail_rows(cfg: ExperimentConfig, exp: str) -> list[dict]:
    tp = cfg.tail_risk
    value = expected_shortfall_bernoulli(Fraction(repr(tp.p)), Fraction(repr(tp.tau)))
    return [_row(exp, 0, {"p": tp.p, "tau": tp.tau}, {"value": float(value), "value_exact": str(value)})]


def _needle_rows(cfg: ExperimentConfig, exp: str) -> list[dict]:
    npar = cfg.needle
    nu = Fraction(repr(npar.nu))
    task = gen_needle_priors(npar.states, nu).tasks[0]
    res = simulate_needle(task, npar.leaves, cfg.trials, cfg.seed)
    return [_row(exp, 0, {"nu": npar.nu, "leaves": npar.leaves, "states": npar.states}, {
        "estimate": res.miss_frequency,
        "ci_low": res.ci_low,
        "ci_high": res.ci_high,
        "miss_count": res.misses,
        "closed_form": res.closed_form,
        "large_error_frequency": res.large_error_frequency,
        "sample_threshold": float(3 / (2 * nu)),
    })]


def _bounded_rows(cfg: ExperimentConfig, exp: str) -> list[dict]:
    ip, bp = cfg.instance, cfg.bounded
    cm = CostModel(bp.T_eval_H, bp.T_eval_AI, bp.T_sample_H, bp.T_sample_AI, bp.humans, ip.n_agents)
    graph = _graph(ip)
    eps = Fraction(repr(ip.epsilon))
    alpha = eps / 40 if bp.alpha is None else Fraction(repr(bp.alpha))
    params = {"n_agents": ip.n_agents, "states": ip.states, "epsilon": ip.epsilon, "branching": bp.branching,
              "alpha": float(alpha), "height": bp.height}
    rows = []
    for k in range(cfg.trials):
        rng = np.random.default_rng(trial_seed(cfg.seed, k))
        task = random_task(rng, ip.n_agents, ip.states, eps, Fraction(repr(ip.delta)), ip.family, ip.max_cells)
        run = run_bounded_agreement(
            [task], graph, cm, bp.branching, alpha, int(rng.integers(2**63)),
            R=bp.height, R_agree=bp.agree_height, max_epochs=bp.max_epochs, budget=cfg.budget,
        )
        o = run.outcomes[0]
        rows.append(_row(exp, k, params, {
            "agreed": o.agreed,
            "messages": o.messages,
            "surprise_count": o.surprises,
            "refinement_count": o.refinements,
            "common_prior_found": o.common_prior_found,
            "bits": o.bits,
            "cost_find_CP": run.ledger.total(cm, "find_CP"),
            "cost_construct_CP": run.ledger.total(cm, "construct_CP"),
            "cost_agree_CP": run.ledger.total(cm, "agree_CP"),
            "cost_total": run.ledger.total(cm),
        }))
    return rows


_RUNNERS = {
    "agreement": _agreement_rows,
    "construct_prior": _prior_rows,
    "lower_bound": _lower_bound_rows,
    "tail_risk": _tail_rows,
    "needle": _needle_rows,
    "bounded": _bounded_rows,
}


def run_experiment(config: ExperimentConfig, persist: bool = True) -> list[dict]:
    """Rows for one config; identical (config, seed) pairs give identical rows."""
    rows = _RUNNERS[config.kind](config, experiment_id(config))
    if persist and config.out:
        write_results(config, rows, Path(config.out))
    return rows


# ---------------------------------------------------------------------------
# sweeps


def _set_path(body: dict, key: str, value) -> None:
    section, name = key.split(".", 1)
    if section not in body or not isinstance(body[section], dict):
        raise ConfigInvalid(f"unknown grid section {section!r}")
    body[section][name] = value


def grid_cells(config: ExperimentConfig) -> list[dict]:
    if not config.grid:
        raise ConfigInvalid("sweep needs a non-empty grid")
    keys = sorted(config.grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(config.grid[k] for k in keys))]


def median_ci(values: Sequence[float], confidence: float = 0.95) -> tuple[float, float, float]:
    """Sample median with a distribution-free order-statistic interval."""
    xs = sorted(values)
    n = len(xs)
    if n == 0:
        raise ValueError("no values")
    a = (1 - confidence) / 2
    lo_idx = max(int(binom.ppf(a, n, 0.5)) - 1, 0)
    hi_idx = min(int(binom.ppf(1 - a, n, 0.5)), n - 1)
    return float(median(xs)), float(xs[lo_idx]), float(xs[hi_idx])


def fit_inverse_square(eps: Sequence[float], rounds: Sequence[float], delta: float) -> dict:
    """Fit rounds ~ c / (delta eps^2) by a geometric mean over positive cells,
    plus the free log-log slope of rounds against 1/eps."""
    pts = [(e, r) for e, r in zip(eps, rounds) if r > 0]
    if not pts:
        return {"c": 0.0, "max_ratio": 0.0, "exponent": float("nan")}
    logs = [math.log(r * delta * e * e) for e, r in pts]
    c = math.exp(sum(logs) / len(logs))
    ratio = max(r / (c / (delta * e * e)) for e, r in zip(eps, rounds))
    if len(pts) >= 2:
        x = np.log([1 / e for e, _ in pts])
        y = np.log([r for _, r in pts])
        slope = float(np.polyfit(x, y, 1)[0])
    else:
        slope = float("nan")
    return {"c": c, "max_ratio": ratio, "exponent": slope}


def sweep(config: ExperimentConfig, persist: bool = True) -> tuple[list[dict], dict]:
    """Cross product of the grid. Every cell reuses the per-trial seeds of the
    master seed, so cells are compared on common random numbers."""
    cells = grid_cells(config)
    rows: list[dict] = []
    summary_cells = []
    base = config.model_dump(mode="python")
    base["grid"] = None
    base["out"] = None
    for ci, cell in enumerate(cells):
        body = json.loads(json.dumps(base))
        for key, value in cell.items():
            _set_path(body, key, value)
        cell_cfg = load_config(body)
        cell_rows = run_experiment(cell_cfg, persist=False)
        for r in cell_rows:
            rows.append({"cell": ci, **{f"grid.{k}": v for k, v in cell.items()}, **r})
        entry = {"cell": ci, **cell, "trials": len(cell_rows)}
        if cell_rows and "rounds" in cell_rows[0]:
            m, lo, hi = median_ci([r["rounds"] for r in cell_rows])
            entry.update(median_rounds=m, median_ci_low=lo, median_ci_high=hi)
            k = sum(bool(r["agreed"]) for r in cell_rows)
            entry["agreement_rate"] = k / len(cell_rows)
        summary_cells.append(entry)
    summary: dict = {"experiment": experiment_id(config), "kind": config.kind, "cells": summary_cells}
    if config.kind == "agreement" and "instance.epsilon" in config.grid and len(config.grid) == 1:
        eps = [c["instance.epsilon"] for c in summary_cells]
        med = [c["median_rounds"] for c in summary_cells]
        summary["scaling"] = fit_inverse_square(eps, med, config.instance.delta)
    if persist and config.out:
        write_results(config, rows, Path(config.out), summary)
    return rows, summary


# ---------------------------------------------------------------------------
# persistence and reports


def _columns(rows: Sequence[dict]) -> list[str]:
    cols: list[str] = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    return cols


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    cols = _columns(rows)
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r.get(k, "") for k in cols})
    return buf.getvalue()


def write_results(config: ExperimentConfig, rows: Sequence[dict], out: Path, summary: dict | None = None) -> Path:
    """Store rows under ``out/<experiment id>/``. Existing rows are never rewritten."""
    exp = experiment_id(config)
    folder = out / exp
    folder.mkdir(parents=True, exist_ok=True)
    name = "rows.csv" if config.format == "csv" else "rows.json"
    body = rows_to_csv(rows) if config.format == "csv" else json.dumps(list(rows), sort_keys=True, indent=1) + "\n"
    target = folder / name
    if target.exists():
        if target.read_text() != body:
            raise FileExistsError(f"{target} holds different rows; results are append-only")
    else:
        target.write_text(body)
    (folder / "config.json").write_text(dump_config(config))
    if summary is not None:
        (folder / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return folder


def _read_rows(path: Path) -> list[dict]:
    if path.suffix == ".json":
        return json.loads(path.read_text())
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def _as_float(x) -> float | None:
    if isinstance(x, bool):
        return float(x)
    if isinstance(x, (int, float)):
        return float(x)
    if x in ("True", "true"):
        return 1.0
    if x in ("False", "false"):
        return 0.0
    try:
        return float(x)
    except (TypeError, ValueError):
        return None


def report(results: str | Path, fmt: Literal["csv", "json"] = "csv") -> dict[str, str]:
    """Aggregate tables and long-format series from stored rows.

    Returns file name to content; the caller decides where to write. Output
    depends only on the stored rows, so repeated reports are byte-identical.
    """
    root = Path(results)
    files = sorted(p for p in root.rglob("rows.*") if p.suffix in (".csv", ".json")) if root.exists() else []
    if not files:
        raise MissingResults(f"no stored rows under {root}")
    table = []
    series = []
    for path in files:
        rows = _read_rows(path)
        exp = path.parent.name
        group_keys = [k for k in _columns(rows) if k.startswith(("param.", "grid."))]
        groups: dict[tuple, list[dict]] = {}
        for r in rows:
            groups.setdefault(tuple(str(r.get(k, "")) for k in group_keys), []).append(r)
        for key in sorted(groups):
            rs = groups[key]
            entry: dict = {"experiment": exp, **dict(zip(group_keys, key)), "n": len(rs)}
            if "agreed" in rs[0]:
                k = int(sum(_as_float(r["agreed"]) for r in rs))
                lo, hi = wilson_interval(k, len(rs))
                entry.update(agreement_rate=k / len(rs), agreement_ci_low=lo, agreement_ci_high=hi)
            if "rounds" in rs[0]:
                m, lo, hi = median_ci([_as_float(r["rounds"]) for r in rs])
                entry.update(median_rounds=m, median_ci_low=lo, median_ci_high=hi)
                eps = _as_float(dict(zip(group_keys, key)).get("grid.instance.epsilon",
                                     dict(zip(group_keys, key)).get("param.epsilon")))
                if eps is not None:
                    series.append({"experiment": exp, "epsilon": eps, "median_rounds": m, "ci_low": lo, "ci_high": hi})
            for col in ("estimate", "value", "optimal", "cost_total"):
                if col in rs[0]:
                    vals = [_as_float(r[col]) for r in rs]
                    entry[f"mean_{col}"] = float(np.mean(vals))
            table.append(entry)
    series.sort(key=lambda r: (r["experiment"], r["epsilon"]))
    if fmt == "json":
        return {
            "report.json": json.dumps(table, sort_keys=True, indent=2) + "\n",
            "series.json": json.dumps(series, sort_keys=True, indent=2) + "\n",
        }
    return {"report.csv": rows_to_csv(table), "series.csv": rows_to_csv(series)}


__all__ = [
    "ExperimentConfig",
    "InstanceParams",
    "ChannelParams",
    "dump_config",
    "experiment_id",
    "fit_inverse_square",
    "grid_cells",
    "load_config",
    "make_identifying",
    "median_ci",
    "random_objective",
    "random_partition",
    "random_prior",
    "random_profile",
    "random_task",
    "report",
    "rows_to_csv",
    "run_experiment",
    "sweep",
    "write_results",
]
