"""Seeded Monte Carlo comparison of rotation designs, allocations and estimators.

Replications are generated in fixed-size blocks. Block ``b`` of design row
``a`` draws every random number from streams keyed on
``(master_seed, b)`` (common random numbers across rows) or
``(master_seed, a, b)``, so results never depend on how blocks are scheduled
across workers. Per-replication outputs are concatenated in block order
before any reduction.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import analytics
from .allocation import AllocationPolicy, neyman_alloc_batch, proportional_alloc, sample_variances
from .designs import (
    CONVENTIONAL,
    FIXED_PANEL,
    FULL,
    AllocationTrace,
    DesignSpec,
    RotationPattern,
    ValidatedDesign,
    iter_epochs,
    round_half_up,
    validate_design,
)
from .errors import ValidationError
from .estimators import change_table, composite_values, epoch_estimates, ise_values
from .population import FunctionalPopulation, population_mean, stratum_variance

SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# scenario description


@dataclass(frozen=True)
class DesignGrid:
    """Design family plus the grid of replacement rates to sweep.

    Either ``m`` (equally spaced replacement times) or explicit
    ``replacement_times`` is given. Each entry of ``alphas`` is a scalar or a
    per-stratum tuple.
    """

    kind: str
    m: int | None = None
    replacement_times: tuple | None = None
    alphas: tuple = (0.0,)
    density: tuple | None = None
    pattern: RotationPattern | None = None

    def __post_init__(self):
        if (self.m is None) == (self.replacement_times is None):
            raise ValidationError("design: give exactly one of m or replacement_times")
        if not self.alphas:
            raise ValidationError("design.alpha grid is empty")
        object.__setattr__(self, "alphas", tuple(a if np.ndim(a) == 0 else tuple(a) for a in self.alphas))

    def spec(self, alpha, pop: FunctionalPopulation) -> DesignSpec:
        if self.m is not None:
            if self.density is not None:
                return DesignSpec.from_density(self.kind, pop.grid, self.m, self.density, alpha, pattern=self.pattern)
            return DesignSpec.uniform(self.kind, pop.grid.T, self.m, alpha, pattern=self.pattern)
        return DesignSpec(self.kind, self.replacement_times, alpha, self.density, self.pattern)


@dataclass(frozen=True)
class EstimatorGrid:
    """HT is always evaluated; composite cells span ``Q x delta`` when enabled."""

    composite: bool = False
    Q: tuple = ()
    delta: tuple = ()

    def __post_init__(self):
        if self.composite and (not self.Q or not self.delta):
            raise ValidationError("estimator: composite grids for Q and delta must be nonempty")
        if any(not 0.0 <= q <= 1.0 for q in self.Q):
            raise ValidationError("estimator.Q values must lie in [0, 1]")
        if any(d < 0 for d in self.delta):
            raise ValidationError("estimator.delta values must be nonnegative")


@dataclass(frozen=True)
class Scenario:
    scenario_id: str
    design: DesignGrid
    allocation: AllocationPolicy
    estimator: EstimatorGrid = field(default_factory=EstimatorGrid)
    replications: int = 1000
    master_seed: int = 0
    block_size: int = 500
    crn: bool = True
    cov_pairs: tuple = ()
    keep_series: bool = False
    analytic: bool = True

    def __post_init__(self):
        if self.replications < 1:
            raise ValidationError("scenario.replications must be >= 1")
        if self.block_size < 1:
            raise ValidationError("scenario.block_size must be >= 1")
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValidationError("scenario.seed must be an unsigned 64-bit integer")
        object.__setattr__(self, "cov_pairs", tuple((float(t), float(u)) for t, u in self.cov_pairs))


# ---------------------------------------------------------------------------
# allocation plumbing


def transition_bounds(design: ValidatedDesign, prev_sizes: np.ndarray, floor: int):
    """Per-stratum bounds on ``n_h(tau_r)`` keeping the transition from ``prev_sizes`` feasible."""
    Nh = design.strata_sizes
    lo = np.broadcast_to(np.minimum(floor, Nh), prev_sizes.shape).copy()
    hi = np.broadcast_to(Nh, prev_sizes.shape).copy()
    if design.kind == FULL:
        return lo, hi
    d = round_half_up(design.alpha * prev_sizes)
    return np.maximum(lo, prev_sizes - d), np.minimum(hi, Nh - d)


def _bare_design(spec: DesignSpec, pop: FunctionalPopulation, n0) -> ValidatedDesign:
    """Validated design with constant placeholder sizes, used to read snapped times and rates."""
    return validate_design(spec, AllocationTrace.constant(n0, spec.m), pop)


def planned_allocation(pop: FunctionalPopulation, spec: DesignSpec, policy: AllocationPolicy):
    """Deterministic allocation trace for proportional and Neyman policies.

    Neyman sizes at each ``tau_r`` use the true stratum variances at that time
    and are constrained to a feasible transition from the previous epoch.
    Returns ``(trace, fallbacks)``.
    """
    n0 = proportional_alloc(pop.strata_sizes, policy.total, policy.floor)
    if policy.kind == "proportional":
        return AllocationTrace.constant(n0, spec.m), 0
    if policy.kind != "neyman":
        raise ValidationError(f"allocation {policy.kind!r} has no planned trace")
    base = _bare_design(spec, pop, n0)
    times = np.concatenate([[0], base.tau_idx])
    var = np.stack([stratum_variance(pop, h)[times] for h in range(pop.H)], axis=-1)
    first = neyman_alloc_batch(pop.strata_sizes, policy.total, var[0], policy.floor)
    sizes, fallbacks = [first.sizes], int(first.fallback)
    for r in range(1, spec.m + 1):
        if spec.kind == FIXED_PANEL:
            sizes.append(sizes[0])
            continue
        lo, hi = transition_bounds(base, sizes[-1], policy.floor)
        nxt = neyman_alloc_batch(pop.strata_sizes, policy.total, var[r], policy.floor, lo, hi)
        sizes.append(nxt.sizes)
        fallbacks += int(nxt.fallback)
    return AllocationTrace(np.stack(sizes)), fallbacks


class AdaptiveRule:
    """Plug-in Neyman sizes from the sample at the grid point just before each ``tau_r``.

    For conventional rotation the sizes are set once at ``tau_1`` from the
    time-integrated sample variances over ``[0, tau_1]`` and then frozen.
    """

    def __init__(self, pop: FunctionalPopulation, design: ValidatedDesign, policy: AllocationPolicy):
        self.pop, self.design, self.policy = pop, design, policy
        self.members = [pop.members(h) for h in range(pop.H)]
        self.fallbacks = 0

    def __call__(self, r: int, mask: np.ndarray, sizes: np.ndarray) -> np.ndarray:
        d, pop, pol = self.design, self.pop, self.policy
        lo, hi = transition_bounds(d, sizes, pol.floor)
        if d.kind == CONVENTIONAL:
            if r > 1:
                return sizes.copy()
            stop = int(d.tau_idx[0])
            cols = [sample_variances(pop.values[:, i], mask, self.members) for i in range(stop + 1)]
            w = np.full(stop + 1, pop.grid.spacing)
            w[[0, -1]] *= 0.5
            var = np.tensordot(w, np.stack(cols), axes=1)
        else:
            var = sample_variances(pop.values[:, int(d.tau_idx[r - 1]) - 1], mask, self.members)
        out = neyman_alloc_batch(pop.strata_sizes, pol.total, var, pol.floor, lo, hi)
        self.fallbacks += int(out.fallback.sum())
        return out.sizes


# ---------------------------------------------------------------------------
# replication blocks


@dataclass(frozen=True)
class _Row:
    index: int
    alpha: object
    design: ValidatedDesign
    adaptive: bool


def _cell_keys(est: EstimatorGrid):
    keys = [("ht", None, None)]
    if est.composite:
        keys += [("composite", float(q), float(d)) for d in est.delta for q in est.Q]
    return keys


def _run_block(pop: FunctionalPopulation, sc: Scenario, row: _Row, block: int, size: int, cov_idx):
    key = (block,) if sc.crn else (row.index, block)
    rule = AdaptiveRule(pop, row.design, sc.allocation) if row.adaptive else None
    est = epoch_estimates(pop, row.design, iter_epochs(row.design, sc.master_seed, key, (size,), rule),
                          need_change=sc.estimator.composite)
    truth = population_mean(pop).values
    grid = pop.grid
    out = {("ht", None, None): ise_values(est.ht, truth, grid)}
    flags = {}
    if sc.estimator.composite:
        for delta in sc.estimator.delta:
            lag = grid.lag_steps(delta)
            table = change_table(est, lag) if lag > 0 and not est.static else None
            for q in sc.estimator.Q:
                vals, fl = composite_values(est, float(q), lag, table)
                key_c = ("composite", float(q), float(delta))
                out[key_c] = ise_values(vals, truth, grid)
                flags[key_c] = fl.sum(axis=-1)
    series = est.ht if sc.keep_series else est.ht[:, cov_idx]
    return out, flags, series, (rule.fallbacks if rule else 0)


_WORKER_POP = None


def _init_worker(pop):
    global _WORKER_POP
    _WORKER_POP = pop
    threadpool_limits(1)


def _worker(args):
    return _run_block(_WORKER_POP, *args)


def _blocks(R: int, size: int):
    return [(b, min(size, R - b * size)) for b in range(math.ceil(R / size))]


# ---------------------------------------------------------------------------
# report


def _sd_se(x: np.ndarray):
    R = x.size
    if R < 2:
        return 0.0, 0.0, 0.0
    s = float(np.std(x, ddof=1))
    if s == 0.0:
        return s, 0.0, 0.0
    m4 = float(np.mean((x - x.mean()) ** 4))
    se_sd = math.sqrt(max(m4 - s**4, 0.0) / R) / (2 * s)
    return s, s / math.sqrt(R), se_sd


def empirical_cov(series: np.ndarray, t_idx: int, u_idx: int):
    """Sample covariance across replications of the estimates at two grid indices and its MC standard error."""
    x = np.asarray(series, dtype=float)
    if x.shape[0] < 2:
        raise ValidationError("empirical_cov needs at least 2 replications")
    a = x[:, t_idx] - x[:, t_idx].mean()
    b = x[:, u_idx] - x[:, u_idx].mean()
    z = a * b
    R = z.size
    return float(z.sum() / (R - 1)), float(np.std(z, ddof=1) / math.sqrt(R))


def to_jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, tuple):
        return [to_jsonable(x) for x in v]
    return v


@dataclass
class SimulationReport:
    """Aggregates of one scenario; ``cells`` has one entry per (alpha, estimator) cell."""

    scenario_id: str
    population: dict
    params: dict
    cells: list
    empirical_cov: list
    ise: dict = field(default_factory=dict, repr=False)
    series: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "scenario_id": self.scenario_id,
            "population": self.population,
            "params": self.params,
            "cells": self.cells,
            "empirical_cov": self.empirical_cov,
            "composite_optimum": composite_optimum(self),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    def long_rows(self):
        metrics = ("mise", "sd_ise", "mc_se.mise", "mc_se.sd_ise", "analytic.mise", "analytic.var_ise")
        for c in self.cells:
            p = c["params"]
            for name in metrics:
                head, _, sub = name.partition(".")
                v = c[head][sub] if sub else c[head]
                if v is None:
                    continue
                yield [c["scenario_id"], p["alpha"], p["method"], p["Q"], p["delta"], name, v]

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scenario_id", "alpha", "method", "Q", "delta", "metric", "value"])
            for row in self.long_rows():
                w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else format_alpha(v)) for v in row])


def format_alpha(v):
    if isinstance(v, list):
        return ";".join(repr(float(x)) for x in v)
    return str(v)


def _analytic(pop, design: ValidatedDesign):
    cov = analytics.cov_kernel(pop, design)
    if design.kind == FULL:
        var = analytics.var_ise_full_asym(pop, design) if design.m else analytics.gaussian_var_ise(cov)
    else:
        var = analytics.var_ise_partial_asym(pop, design)
    return {"mise": analytics.mise(cov), "var_ise": var}


def _cell_id(sid, alpha, key):
    a = format_alpha(to_jsonable(alpha))
    if key[0] == "ht":
        return f"{sid}/alpha={a}/ht"
    return f"{sid}/alpha={a}/composite/Q={key[1]!r}/delta={key[2]!r}"


def run_scenario(scenario: Scenario, pop: FunctionalPopulation, workers: int = 1) -> SimulationReport:
    """Run every design row and estimator cell of ``scenario`` on ``pop``.

    The result is identical for any ``workers >= 1``.
    """
    sc = scenario
    grid = pop.grid
    policy = sc.allocation
    if policy.total > pop.N:
        raise ValidationError(f"allocation.total={policy.total} exceeds the population size {pop.N}")
    cov_idx = np.array([[grid.snap(t), grid.snap(u)] for t, u in sc.cov_pairs], dtype=np.int64).reshape(-1, 2)
    cols = np.unique(cov_idx) if cov_idx.size else np.zeros(0, dtype=np.int64)

    rows, analytic, row_flags = [], [], []
    for a_i, alpha in enumerate(sc.design.alphas):
        spec = sc.design.spec(alpha, pop)
        try:
            if policy.kind == "adaptive":
                trace = AllocationTrace.constant(proportional_alloc(pop.strata_sizes, policy.total, policy.floor), spec.m)
                nfall = 0
            else:
                trace, nfall = planned_allocation(pop, spec, policy)
            design = validate_design(spec, trace, pop)
        except ValidationError as exc:
            raise ValidationError(f"design row alpha={alpha}: {exc}") from None
        rows.append(_Row(a_i, alpha, design, policy.kind == "adaptive"))
        analytic.append(_analytic(pop, design) if sc.analytic and policy.kind != "adaptive" else None)
        row_flags.append({"rounding": list(design.rounding_notes), "allocation_fallbacks": nfall})

    tasks = [(sc, row, b, size, cols) for row in rows for b, size in _blocks(sc.replications, sc.block_size)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(pop,)) as ex:
            results = list(ex.map(_worker, tasks))
    else:
        with threadpool_limits(1):
            results = [_run_block(pop, *t) for t in tasks]

    keys = _cell_keys(sc.estimator)
    per_row = len(results) // len(rows)
    cells, ise_store, series_store, emp = [], {}, {}, []
    for row, an, rf in zip(rows, analytic, row_flags):
        chunk = results[row.index * per_row:(row.index + 1) * per_row]
        series = np.concatenate([c[2] for c in chunk], axis=0)
        fall = rf["allocation_fallbacks"] + sum(c[3] for c in chunk)
        alpha_j = to_jsonable(row.alpha)
        for key in keys:
            x = np.concatenate([c[0][key] for c in chunk])
            fl = np.concatenate([c[1][key] for c in chunk]) if key in chunk[0][1] else np.zeros(x.size, dtype=np.int64)
            sd, se_mean, se_sd = _sd_se(x)
            cid = _cell_id(sc.scenario_id, row.alpha, key)
            ise_store[cid] = x
            cells.append({
                "scenario_id": cid,
                "params": {"alpha": alpha_j, "method": key[0], "Q": key[1], "delta": key[2],
                           "design": sc.design.kind, "allocation": policy.kind, "n": policy.total,
                           "m": row.design.m, "replications": int(x.size)},
                "mise": float(x.mean()),
                "sd_ise": sd,
                "mc_se": {"mise": se_mean, "sd_ise": se_sd},
                "flags": {
                    "degenerate_replications": int(np.count_nonzero(fl)),
                    "degenerate_points": int(fl.sum()),
                    "rounding": rf["rounding"],
                    "allocation_fallbacks": int(fall),
                },
                "analytic": (an if key[0] == "ht" and an is not None else {"mise": None, "var_ise": None}),
            })
        if sc.keep_series:
            series_store[_cell_id(sc.scenario_id, row.alpha, keys[0])] = series
        for (t, u), (i, j) in zip(sc.cov_pairs, cov_idx):
            if sc.keep_series:
                ci, cj = i, j
            else:
                ci, cj = int(np.searchsorted(cols, i)), int(np.searchsorted(cols, j))
            if series.shape[0] >= 2:
                val, se = empirical_cov(series, ci, cj)
            else:
                val, se = 0.0, 0.0
            ref = None
            if sc.analytic and an is not None:
                ref = float(analytics.cov_kernel(pop, row.design).values[i, j])
            emp.append({"alpha": alpha_j, "t": t, "u": u, "cov": val, "mc_se": se, "analytic": ref})

    params = {
        "design": sc.design.kind,
        "m": sc.design.m,
        "replacement_times": to_jsonable(sc.design.replacement_times),
        "alphas": to_jsonable(sc.design.alphas),
        "allocation": asdict(policy),
        "estimator": {"composite": sc.estimator.composite, "Q": list(sc.estimator.Q), "delta": list(sc.estimator.delta)},
        "replications": sc.replications,
        "seed": int(sc.master_seed),
        "block_size": sc.block_size,
        "crn": sc.crn,
    }
    popinfo = {"N": pop.N, "H": pop.H, "strata_sizes": pop.strata_sizes.tolist(),
               "T": grid.T, "grid_size": grid.size}
    return SimulationReport(sc.scenario_id, popinfo, params, cells, emp, ise_store, series_store)


# ---------------------------------------------------------------------------
# summaries


def composite_optimum(report: SimulationReport | dict) -> list:
    """Per lag ``delta``: the ``(alpha, Q)`` cell with minimal composite MISE."""
    cells = report.cells if isinstance(report, SimulationReport) else report["cells"]
    best = {}
    for c in cells:
        p = c["params"]
        if p["method"] != "composite":
            continue
        d = p["delta"]
        if d not in best or c["mise"] < best[d]["mise"]:
            best[d] = {"delta": d, "alpha_opt": p["alpha"], "Q_opt": p["Q"], "mise": c["mise"]}
    return [best[d] for d in sorted(best)]


def _key(c):
    p = c["params"]
    a = p["alpha"]
    return (tuple(a) if isinstance(a, list) else a, p["method"], p["Q"], p["delta"])


def compare_designs(reports) -> list:
    """Ratio and difference rows of every report against the first one.

    Cells are matched on ``(alpha, method, Q, delta)``. A report with a single
    design row (e.g. full replacement or a conventional benchmark) is matched
    against every alpha of the baseline on ``(method, Q, delta)``; if nothing
    matches, HT cells are paired by position.
    """
    reps = [r.to_dict() if isinstance(r, SimulationReport) else r for r in reports]
    if len(reps) < 1:
        raise ValidationError("compare_designs needs at least one report")
    base = reps[0]
    sig = lambda r: (r["population"]["N"], r["population"]["T"], r["population"]["grid_size"])
    out = []
    for other in reps:
        if sig(other) != sig(base):
            raise ValidationError(f"report {other['scenario_id']} uses a different population or grid")
        omap = {_key(c): c for c in other["cells"]}
        single = len({_key(c)[0] for c in other["cells"]}) == 1
        by_est = {_key(c)[1:]: c for c in other["cells"]} if single else {}
        pairs = []
        for b in base["cells"]:
            k = _key(b)
            c = omap.get(k) or by_est.get(k[1:])
            if c is not None:
                pairs.append((b, c))
        if not pairs:
            b_ht = [c for c in base["cells"] if c["params"]["method"] == "ht"]
            o_ht = [c for c in other["cells"] if c["params"]["method"] == "ht"]
            pairs = list(zip(b_ht, o_ht))
        for b, c in pairs:
            bp = b["params"]

            def ratio(x, y):
                return x / y if y != 0 else (1.0 if x == y else math.inf)

            out.append({
                "baseline": base["scenario_id"],
                "other": other["scenario_id"],
                "alpha": bp["alpha"],
                "alpha_other": c["params"]["alpha"],
                "method": bp["method"],
                "Q": bp["Q"],
                "delta": bp["delta"],
                "mise_baseline": b["mise"],
                "mise_other": c["mise"],
                "mise_ratio": ratio(c["mise"], b["mise"]),
                "mise_diff": c["mise"] - b["mise"],
                "sd_baseline": b["sd_ise"],
                "sd_other": c["sd_ise"],
                "sd_ratio": ratio(c["sd_ise"], b["sd_ise"]),
                "sd_diff": c["sd_ise"] - b["sd_ise"],
            })
    return out


def write_comparison_csv(rows: list, path: str | Path) -> None:
    cols = ["baseline", "other", "alpha", "alpha_other", "method", "Q", "delta", "mise_baseline", "mise_other", "mise_ratio",
            "mise_diff", "sd_baseline", "sd_other", "sd_ratio", "sd_diff"]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else format_alpha(r[c])) for c in cols])
