"""Structured run configuration (YAML) and its translation into scenario objects.

Every validation message starts with the dotted key path of the offending
entry, e.g. ``design.alpha[2]``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .allocation import KINDS as ALLOC_KINDS
from .allocation import AllocationPolicy
from .designs import CONVENTIONAL, KINDS as DESIGN_KINDS, RotationPattern
from .errors import ConfigError, DataError, DataFormatError, ValidationError
from .harness import DesignGrid, EstimatorGrid, Scenario
from .population import CsvSchema, StratumSpec, TimeGrid, load_population, synth_population

SCHEMA_VERSION = 1
OUT_ENV = "ROTFDA_OUT"
_TOP = {"schema_version", "population", "design", "allocation", "estimator", "scenario", "analyze", "output"}


def _keys(node, path, allowed, required=()):
    if not isinstance(node, dict):
        raise ConfigError(f"{path}: expected a mapping")
    extra = sorted(set(node) - set(allowed))
    if extra:
        raise ConfigError(f"{path}.{extra[0]}: unknown key")
    for k in required:
        if k not in node:
            raise ConfigError(f"{path}.{k}: required key is missing")


def _num(node, path, kind=float, lo=None, hi=None):
    if isinstance(node, bool) or not isinstance(node, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {node!r}")
    if kind is int and (not float(node).is_integer()):
        raise ConfigError(f"{path}: expected an integer, got {node!r}")
    v = kind(node)
    if lo is not None and v < lo:
        raise ConfigError(f"{path}: must be >= {lo}, got {v}")
    if hi is not None and v > hi:
        raise ConfigError(f"{path}: must be <= {hi}, got {v}")
    return v


def _list(node, path, nonempty=True):
    if not isinstance(node, list) or (nonempty and not node):
        raise ConfigError(f"{path}: expected a nonempty list")
    return node


@dataclass(frozen=True)
class PopulationSource:
    csv: Path | None = None
    strata: tuple = ()
    grid: TimeGrid | None = None
    seed: int = 0

    def load(self):
        if self.csv is not None:
            return load_population(self.csv, CsvSchema())
        return synth_population(self.strata, self.grid, self.seed)


@dataclass(frozen=True)
class RunConfig:
    population: PopulationSource
    scenario: Scenario
    output_dir: Path
    exact: bool = False
    corollary: bool = True
    source: Path | None = field(default=None, compare=False)


def _population(node, base: Path) -> PopulationSource:
    _keys(node, "population", {"csv", "synthetic"})
    if ("csv" in node) == ("synthetic" in node):
        raise ConfigError("population: give exactly one of csv or synthetic")
    if "csv" in node:
        if not isinstance(node["csv"], str):
            raise ConfigError("population.csv: expected a file path")
        p = Path(node["csv"])
        return PopulationSource(csv=p if p.is_absolute() else base / p)
    syn = node["synthetic"]
    _keys(syn, "population.synthetic", {"seed", "grid", "strata"}, ("grid", "strata"))
    g = syn["grid"]
    _keys(g, "population.synthetic.grid", {"T", "spacing", "points"}, ("T",))
    T = _num(g["T"], "population.synthetic.grid.T", lo=0)
    try:
        if "spacing" in g:
            grid = TimeGrid.from_spacing(T, _num(g["spacing"], "population.synthetic.grid.spacing", lo=0))
        elif "points" in g:
            grid = TimeGrid.uniform(T, _num(g["points"], "population.synthetic.grid.points", int, lo=2))
        else:
            raise ConfigError("population.synthetic.grid: give spacing or points")
    except ValidationError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"population.synthetic.grid: {exc}") from None
    strata = []
    fields = {"size", "variance", "decay", "level", "amplitude", "period", "phase", "name"}
    for i, s in enumerate(_list(syn["strata"], "population.synthetic.strata")):
        p = f"population.synthetic.strata[{i}]"
        _keys(s, p, fields, ("size",))
        kw = {"size": _num(s["size"], f"{p}.size", int, lo=2)}
        for k in ("variance", "decay"):
            if k in s:
                kw[k] = _num(s[k], f"{p}.{k}", lo=0)
        for k in ("level", "amplitude", "period", "phase"):
            if k in s:
                kw[k] = _num(s[k], f"{p}.{k}")
        if "name" in s:
            kw["name"] = str(s["name"])
        strata.append(StratumSpec(**kw))
    seed = _num(syn.get("seed", 0), "population.synthetic.seed", int, lo=0, hi=2**64 - 1)
    return PopulationSource(strata=tuple(strata), grid=grid, seed=seed)


def load_pattern(path: Path) -> RotationPattern:
    """Pattern CSV with header ``epoch,slots``; ``slots`` is a space-separated list of unit slots."""
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise DataError(f"pattern file not found: {path}") from None
    if not rows or [c.strip() for c in rows[0]] != ["epoch", "slots"]:
        raise DataFormatError(f"{path}: header must be 'epoch,slots'")
    by_epoch = {}
    for ln, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise DataFormatError(f"{path}:{ln}: expected 2 columns")
        try:
            by_epoch[int(row[0])] = tuple(int(x) for x in row[1].split())
        except ValueError:
            raise DataFormatError(f"{path}:{ln}: non-integer epoch or slot") from None
    if sorted(by_epoch) != list(range(len(by_epoch))):
        raise DataFormatError(f"{path}: epochs must be numbered 0..m without gaps")
    return RotationPattern(tuple(by_epoch[r] for r in range(len(by_epoch))))


def _alpha_entry(a, path):
    if isinstance(a, list):
        return tuple(_num(x, f"{path}[{j}]", lo=0, hi=1) for j, x in enumerate(a))
    return _num(a, path, lo=0, hi=1)


def _design(node, base: Path) -> DesignGrid:
    _keys(node, "design", {"kind", "m", "tau", "alpha", "density", "pattern"}, ("kind",))
    kind = node["kind"]
    if kind not in DESIGN_KINDS:
        raise ConfigError(f"design.kind: expected one of {DESIGN_KINDS}, got {kind!r}")
    if ("m" in node) == ("tau" in node):
        raise ConfigError("design: give exactly one of m or tau")
    m = _num(node["m"], "design.m", int, lo=0) if "m" in node else None
    tau = None
    if "tau" in node:
        tau = tuple(_num(t, f"design.tau[{i}]") for i, t in enumerate(_list(node["tau"], "design.tau", nonempty=False)))
    raw = node.get("alpha", [0.0])
    if not isinstance(raw, list):
        raw = [raw]
    alphas = tuple(_alpha_entry(a, f"design.alpha[{i}]") for i, a in enumerate(_list(raw, "design.alpha")))
    density = None
    if "density" in node:
        density = tuple(_num(x, f"design.density[{i}]", lo=0) for i, x in enumerate(_list(node["density"], "design.density")))
    pattern = None
    if "pattern" in node:
        if kind != CONVENTIONAL:
            raise ConfigError("design.pattern: only conventional_rotation takes a rotation pattern")
        p = Path(str(node["pattern"]))
        pattern = load_pattern(p if p.is_absolute() else base / p)
    try:
        return DesignGrid(kind, m, tau, alphas, density, pattern)
    except ValidationError as exc:
        raise ConfigError(f"design: {exc}") from None


def _allocation(node) -> AllocationPolicy:
    _keys(node, "allocation", {"kind", "n", "floor"}, ("kind", "n"))
    if node["kind"] not in ALLOC_KINDS:
        raise ConfigError(f"allocation.kind: expected one of {ALLOC_KINDS}, got {node['kind']!r}")
    n = _num(node["n"], "allocation.n", int, lo=1)
    floor = _num(node.get("floor", 2), "allocation.floor", int, lo=1)
    try:
        return AllocationPolicy(node["kind"], n, floor)
    except ValidationError as exc:
        raise ConfigError(f"allocation.floor: {exc}") from None


def _estimator(node) -> EstimatorGrid:
    if node is None:
        return EstimatorGrid()
    _keys(node, "estimator", {"composite", "Q", "delta"})
    comp = node.get("composite", False)
    if not isinstance(comp, bool):
        raise ConfigError("estimator.composite: expected true or false")
    Q = tuple(_num(q, f"estimator.Q[{i}]", lo=0, hi=1) for i, q in enumerate(node.get("Q", [])))
    delta = tuple(_num(d, f"estimator.delta[{i}]", lo=0) for i, d in enumerate(node.get("delta", [])))
    if comp and not Q:
        raise ConfigError("estimator.Q: required when composite is true")
    if comp and not delta:
        raise ConfigError("estimator.delta: required when composite is true")
    return EstimatorGrid(comp, Q, delta)


def parse_config(data, base: Path = Path("."), seed: int | None = None, out: str | None = None,
                 env: dict | None = None) -> RunConfig:
    """Validate a config mapping; ``seed``/``out`` override the file, ``env`` supplies ``ROTFDA_OUT``."""
    _keys(data, "config", _TOP, ("schema_version", "population", "design", "allocation", "scenario"))
    if data["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: unsupported version {data['schema_version']!r} (expected {SCHEMA_VERSION})")
    pop = _population(data["population"], base)
    design = _design(data["design"], base)
    alloc = _allocation(data["allocation"])
    est = _estimator(data.get("estimator"))
    sc = data["scenario"]
    _keys(sc, "scenario", {"id", "replications", "seed", "block_size", "crn", "cov_pairs"})
    sid = str(sc.get("id", "scenario"))
    R = _num(sc.get("replications", 1000), "scenario.replications", int, lo=1)
    s = seed if seed is not None else sc.get("seed", 0)
    s = _num(s, "scenario.seed", int, lo=0, hi=2**64 - 1)
    block = _num(sc.get("block_size", 500), "scenario.block_size", int, lo=1)
    crn = sc.get("crn", True)
    if not isinstance(crn, bool):
        raise ConfigError("scenario.crn: expected true or false")
    pairs = []
    for i, pr in enumerate(sc.get("cov_pairs", [])):
        if not isinstance(pr, list) or len(pr) != 2:
            raise ConfigError(f"scenario.cov_pairs[{i}]: expected [t, u]")
        pairs.append((_num(pr[0], f"scenario.cov_pairs[{i}][0]"), _num(pr[1], f"scenario.cov_pairs[{i}][1]")))
    an = data.get("analyze", {}) or {}
    _keys(an, "analyze", {"exact", "corollary"})
    outnode = data.get("output", {}) or {}
    _keys(outnode, "output", {"dir"})
    env = {} if env is None else env
    out_dir = out or env.get(OUT_ENV) or outnode.get("dir") or "out"
    out_path = Path(out_dir)
    if not out_path.is_absolute() and out is None and not env.get(OUT_ENV):
        out_path = base / out_path
    scenario = Scenario(sid, design, alloc, est, R, s, block, crn, tuple(pairs))
    return RunConfig(pop, scenario, out_path, bool(an.get("exact", False)), bool(an.get("corollary", True)))


def read_config(path: str | Path, seed=None, out=None, env=None) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: not valid YAML ({exc})") from None
    cfg = parse_config(data, p.parent, seed, out, env)
    return RunConfig(cfg.population, cfg.scenario, cfg.output_dir, cfg.exact, cfg.corollary, p)
