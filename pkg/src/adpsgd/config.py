"""Run configuration: TOML schema, validation and resolution into live objects.

A configuration file is TOML. Top-level keys pick the algorithm and budget;
``[topology]``, ``[problem]``, ``[partition]``, ``[staleness]``, ``[speed]``,
``[theory]`` and ``[output]`` sections describe the rest. Validation errors
carry the dotted key path and, when the key appears in the file, its line.
"""

from __future__ import annotations

import math
import re
import sys
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import problems as pb
from . import theory
from . import topology as tp
from .errors import ConfigError, ValidationError

ALGORITHMS = ("adpsgd", "dpsgd", "allreduce", "apsgd", "sgd")
MODES = ("logical", "simulate", "synchronous")
PROTOCOLS = ("bipartite", "serialized", "naive")


@dataclass
class TopologySpec:
    kind: str = "ring"
    n: int = 4
    deadlock_free: bool = False
    path: str | None = None
    sizes: list[int] | None = None


@dataclass
class ProblemSpec:
    kind: str = "quadratic"
    dim: int = 10
    condition: float = 10.0
    num_samples: int = 100
    noise: float = 0.0
    seed: int = 0
    l2: float = 0.0
    csv: str | None = None
    hidden: int = 8
    in_dim: int = 3
    init: str = "zeros"
    init_scale: float = 1.0
    init_spread: float = 0.0


@dataclass
class PartitionSpec:
    strategy: str = "shared"
    weights: list[float] | None = None
    seed: int = 0


@dataclass
class StalenessSpec:
    mode: str = "zero"
    tau: int = 0
    cap: int = 0


@dataclass
class SlowdownSpec:
    target: str = "worker"
    index: Any = 0
    factor: float = 1.0
    start: float = 0.0
    end: float = math.inf


@dataclass
class SpeedSpec:
    compute_time: Any = 1.0
    link_time: float = 0.0
    local_update: bool = True
    protocol: str = "bipartite"
    allreduce_alpha: float = 0.0
    allreduce_beta: float = 0.0
    slowdown: list[SlowdownSpec] = field(default_factory=list)


@dataclass
class TheorySpec:
    probe_draws: int = 1000


@dataclass
class OutputSpec:
    dir: str | None = None
    trace: bool = True
    plot: bool = False


@dataclass
class RunConfig:
    name: str = "run"
    algorithm: str = "adpsgd"
    mode: str = "logical"
    gamma: Any = 0.01
    batch_size: int = 1
    iterations: int | None = None
    horizon: float | None = None
    seeds: list[int] = field(default_factory=lambda: [0])
    record_every: int = 100
    target_loss: float | None = None
    target_gap: float | None = None
    stop_at_target: bool = False
    topology: TopologySpec = field(default_factory=TopologySpec)
    problem: ProblemSpec = field(default_factory=ProblemSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    staleness: StalenessSpec = field(default_factory=StalenessSpec)
    speed: SpeedSpec = field(default_factory=SpeedSpec)
    theory: TheorySpec = field(default_factory=TheorySpec)
    output: OutputSpec = field(default_factory=OutputSpec)
    source: str | None = field(default=None, compare=False, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("source")
        return _strip_none(d)

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def replace(self, **changes) -> "RunConfig":
        d = self.to_dict()
        for key, value in changes.items():
            set_path(d, key, value)
        return from_dict(d, source=self.source)


def _strip_none(d):
    if isinstance(d, dict):
        return {k: _strip_none(v) for k, v in d.items() if v is not None and not _is_inf(v)}
    if isinstance(d, list):
        return [_strip_none(v) for v in d]
    return d


def _is_inf(v) -> bool:
    return isinstance(v, float) and math.isinf(v)


def set_path(d: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    cur = d
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
        if not isinstance(cur, dict):
            raise ConfigError(f"cannot descend into non-table key {p!r}", dotted)
    if value is None:
        cur.pop(parts[-1], None)
    else:
        cur[parts[-1]] = value


def parse_value(text: str):
    """Parse a command-line value as a TOML literal, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


class _Locator:
    """Maps dotted key paths to line numbers in the source text."""

    def __init__(self, text: str | None):
        self.lines = text.splitlines() if text else []

    def __call__(self, path: str) -> str:
        if not self.lines:
            return path
        parts = path.split(".")
        key = parts[-1]
        section = ".".join(parts[:-1])
        current = ""
        pat = re.compile(rf"^\s*{re.escape(key)}\s*=")
        for no, line in enumerate(self.lines, 1):
            m = re.match(r"^\s*\[\[?\s*([^\]]+?)\s*\]\]?", line)
            if m:
                current = m.group(1)
                continue
            if current == section and pat.match(line):
                return f"{path} (line {no})"
        return path


_SECTIONS = {
    "topology": TopologySpec,
    "problem": ProblemSpec,
    "partition": PartitionSpec,
    "staleness": StalenessSpec,
    "speed": SpeedSpec,
    "theory": TheorySpec,
    "output": OutputSpec,
}

_NUMBER = (int, float)


def _check_type(value, expected, where):
    if expected is float and isinstance(value, bool):
        raise ConfigError(f"expected a number, got {value!r}", where)
    if expected is float and isinstance(value, _NUMBER):
        return float(value)
    if expected is int and isinstance(value, bool):
        raise ConfigError(f"expected an integer, got {value!r}", where)
    if not isinstance(value, expected):
        name = expected.__name__ if isinstance(expected, type) else "/".join(t.__name__ for t in expected)
        raise ConfigError(f"expected {name}, got {value!r}", where)
    return value


_FIELD_TYPES: dict[type, dict[str, Any]] = {
    TopologySpec: {"kind": str, "n": int, "deadlock_free": bool, "path": str, "sizes": list},
    ProblemSpec: {
        "kind": str, "dim": int, "condition": float, "num_samples": int, "noise": float, "seed": int,
        "l2": float, "csv": str, "hidden": int, "in_dim": int, "init": str, "init_scale": float,
        "init_spread": float,
    },
    PartitionSpec: {"strategy": str, "weights": list, "seed": int},
    StalenessSpec: {"mode": str, "tau": int, "cap": int},
    SpeedSpec: {
        "compute_time": (int, float, list), "link_time": float, "local_update": bool, "protocol": str,
        "allreduce_alpha": float, "allreduce_beta": float, "slowdown": list,
    },
    SlowdownSpec: {"target": str, "index": (int, list), "factor": float, "start": float, "end": float},
    TheorySpec: {"probe_draws": int},
    OutputSpec: {"dir": str, "trace": bool, "plot": bool},
}

_TOP_TYPES = {
    "name": str, "algorithm": str, "mode": str, "gamma": (int, float, str), "batch_size": int,
    "iterations": int, "horizon": float, "seeds": list, "record_every": int, "target_loss": float,
    "target_gap": float, "stop_at_target": bool,
}


def _build(cls, data: dict, prefix: str, loc: _Locator):
    if not isinstance(data, dict):
        raise ConfigError("expected a table", loc(prefix))
    types = _FIELD_TYPES[cls]
    kwargs = {}
    for key, value in data.items():
        where = loc(f"{prefix}.{key}")
        if key not in types:
            raise ConfigError(f"unknown key; expected one of {sorted(types)}", where)
        if cls is SpeedSpec and key == "slowdown":
            kwargs[key] = [
                _build(SlowdownSpec, item, f"{prefix}.slowdown[{i}]", loc) for i, item in enumerate(value)
            ]
            continue
        kwargs[key] = _check_type(value, types[key], where)
    return cls(**kwargs)


def from_dict(data: dict, source_text: str | None = None, source: str | None = None) -> RunConfig:
    loc = _Locator(source_text)
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value, key, loc)
        elif key in _TOP_TYPES:
            kwargs[key] = _check_type(value, _TOP_TYPES[key], loc(key))
        else:
            raise ConfigError("unknown top-level key", loc(key))
    cfg = RunConfig(**kwargs, source=source)
    validate(cfg, loc)
    return cfg


def loads(text: str, source: str | None = None) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(exc), source) from exc
    return from_dict(data, text, source)


def load(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", str(path)) from exc
    return loads(text, str(path))


def validate(cfg: RunConfig, loc: _Locator | None = None) -> None:
    loc = loc or _Locator(None)

    def need(cond, msg, key):
        if not cond:
            raise ConfigError(msg, loc(key))

    need(cfg.algorithm in ALGORITHMS, f"must be one of {ALGORITHMS}", "algorithm")
    need(cfg.mode in MODES, f"must be one of {MODES}", "mode")
    if cfg.mode == "simulate":
        need(cfg.algorithm == "adpsgd", "event simulation models the AD-PSGD protocol only", "algorithm")
    if cfg.mode == "synchronous":
        need(cfg.algorithm in ("allreduce", "dpsgd"), "synchronous timing needs allreduce or dpsgd", "algorithm")
    need(cfg.batch_size >= 1, "must be at least 1", "batch_size")
    need(len(cfg.seeds) > 0, "seed list must be nonempty", "seeds")
    need(all(isinstance(s, int) and not isinstance(s, bool) for s in cfg.seeds), "seeds must be integers", "seeds")
    need(cfg.record_every >= 1, "must be at least 1", "record_every")
    if isinstance(cfg.gamma, str):
        need(cfg.gamma == "corollary", "must be a positive number or 'corollary'", "gamma")
        need(cfg.iterations is not None, "the corollary step size needs an iteration budget", "iterations")
    else:
        need(cfg.gamma > 0, "must be positive", "gamma")
    if cfg.mode == "logical":
        need(cfg.iterations is not None and cfg.iterations >= 0, "logical runs need iterations >= 0", "iterations")
    else:
        need(
            cfg.iterations is not None or cfg.horizon is not None,
            "timed runs need a horizon or an iteration budget",
            "horizon",
        )
    if cfg.horizon is not None:
        need(cfg.horizon >= 0, "must be nonnegative", "horizon")
    need(cfg.target_loss is None or cfg.target_gap is None, "give target_loss or target_gap, not both", "target_gap")

    t = cfg.topology
    need(t.kind in ("ring", "skip-ring", "complete", "complete-bipartite", "file"), "unknown topology kind", "topology.kind")
    need(t.n >= 1, "must be at least 1", "topology.n")
    if t.kind == "file":
        need(t.path is not None, "file topologies need a path", "topology.path")
    if t.kind == "complete-bipartite":
        need(t.sizes is not None and len(t.sizes) == 2, "needs sizes = [a, b]", "topology.sizes")

    p = cfg.problem
    need(p.kind in ("quadratic", "logistic", "small-mlp"), "unknown problem kind", "problem.kind")
    need(p.dim >= 1, "must be positive", "problem.dim")
    need(p.num_samples >= 1, "must be positive", "problem.num_samples")
    need(p.condition >= 1, "must be >= 1", "problem.condition")
    need(p.noise >= 0, "must be nonnegative", "problem.noise")
    need(p.init in ("zeros", "random"), "must be 'zeros' or 'random'", "problem.init")

    need(cfg.partition.strategy in (pb.SHARED, pb.SPLIT), "must be 'shared' or 'split'", "partition.strategy")

    s = cfg.staleness
    need(s.mode in ("zero", "fixed", "uniform"), "must be zero, fixed or uniform", "staleness.mode")
    need(s.tau >= 0 and s.cap >= 0, "must be nonnegative", "staleness.tau")
    if s.mode == "fixed":
        need(s.cap == 0 or s.tau <= s.cap, "tau exceeds cap", "staleness.tau")

    sp = cfg.speed
    need(sp.protocol in PROTOCOLS, f"must be one of {PROTOCOLS}", "speed.protocol")
    need(sp.link_time >= 0, "must be nonnegative", "speed.link_time")
    ct = sp.compute_time if isinstance(sp.compute_time, list) else [sp.compute_time]
    need(all(isinstance(c, _NUMBER) and c > 0 for c in ct), "compute times must be positive", "speed.compute_time")
    for i, sd in enumerate(sp.slowdown):
        need(sd.target in ("worker", "edge"), "must be 'worker' or 'edge'", f"speed.slowdown[{i}].target")
        need(sd.factor >= 1, "slowdown factors must be >= 1", f"speed.slowdown[{i}].factor")
        need(sd.end >= sd.start, "end precedes start", f"speed.slowdown[{i}].end")
    need(cfg.theory.probe_draws >= 100, "need at least 100 draws", "theory.probe_draws")


@dataclass
class Setup:
    """A configuration resolved into problem, graph, partition and step size."""

    config: RunConfig
    problem: pb.Problem
    graph: tp.TopologyGraph
    policy: tp.SelectionPolicy
    partition: pb.DataPartition
    x0: np.ndarray
    gamma: float

    @property
    def n(self) -> int:
        return self.graph.n

    @property
    def M(self) -> int:
        return self.config.batch_size

    @property
    def staleness_cap(self) -> int:
        s = self.config.staleness
        return max(s.cap, s.tau) if s.mode == "fixed" else (s.cap if s.mode == "uniform" else 0)

    @cached_property
    def lipschitz(self) -> float:
        return pb.estimate_lipschitz(self.problem)

    @cached_property
    def variances(self) -> pb.VarianceEstimate:
        return estimate_variances(self.problem, self.partition, self.x0, self.config)

    @cached_property
    def rho(self) -> float:
        return tp.spectral_gap(tp.expected_gram(self.graph, self.policy))

    def theory_inputs(self, gamma: float | None = None) -> theory.TheoryInputs:
        v = self.variances
        return theory.TheoryInputs(
            n=self.n,
            M=self.M,
            L=self.lipschitz,
            T=self.staleness_cap,
            rho=self.rho,
            sigma_sq=v.sigma_sq,
            varsigma_sq=v.varsigma_sq,
            gamma=self.gamma if gamma is None else gamma,
            K=max(1, self.config.iterations or 1),
        )

    def target(self) -> float | None:
        c = self.config
        if c.target_loss is not None:
            return c.target_loss
        if c.target_gap is not None:
            f0 = self.problem.loss(self.x0)
            fs = self.problem.f_star_bound
            return fs + c.target_gap * (f0 - fs)
        return None


def build_graph(spec: TopologySpec, base: Path | None = None) -> tp.TopologyGraph:
    if spec.kind == "ring":
        return tp.build_ring(spec.n)
    if spec.kind == "skip-ring":
        return tp.build_skip_ring(spec.n, deadlock_free=spec.deadlock_free)
    if spec.kind == "complete":
        return tp.build_complete(spec.n)
    if spec.kind == "complete-bipartite":
        return tp.build_complete_bipartite(*spec.sizes)
    path = Path(spec.path)
    if base is not None and not path.is_absolute():
        path = base / path
    return tp.TopologyGraph.load(path)


def build_problem(spec: ProblemSpec, base: Path | None = None) -> pb.Problem:
    if spec.kind == "quadratic":
        return pb.make_quadratic(spec.dim, spec.condition, spec.num_samples, spec.noise, spec.seed)
    if spec.kind == "logistic":
        if spec.csv is not None:
            path = Path(spec.csv)
            if base is not None and not path.is_absolute():
                path = base / path
            X, y = pb.load_csv_dataset(path)
        else:
            X, y = pb.synthetic_logistic_data(spec.dim, spec.num_samples, spec.seed)
        return pb.make_logistic(X, y, spec.l2)
    return pb.make_mlp(spec.in_dim, spec.hidden, spec.num_samples, spec.noise, spec.seed)


def initial_model(problem: pb.Problem, spec: ProblemSpec) -> np.ndarray:
    if spec.init == "zeros":
        return np.zeros(problem.dim)
    return spec.init_scale * np.random.default_rng([spec.seed, 7]).standard_normal(problem.dim)


def estimate_variances(problem, partition, x0, cfg: RunConfig) -> pb.VarianceEstimate:
    probes = [x0]
    if problem.optimum is not None:
        probes += [problem.optimum, 0.5 * (x0 + problem.optimum)]
    else:
        rng = np.random.default_rng([cfg.problem.seed, 11])
        probes += [x0 + rng.standard_normal(problem.dim) for _ in range(2)]
    rng = np.random.default_rng([cfg.problem.seed, 13])
    return pb.estimate_variances(problem, partition, probes, cfg.theory.probe_draws, rng)


def resolve(cfg: RunConfig) -> Setup:
    base = Path(cfg.source).parent if cfg.source else None
    try:
        graph = build_graph(cfg.topology, base)
        problem = build_problem(cfg.problem, base)
    except ValidationError as exc:
        raise ConfigError(str(exc), "topology/problem") from exc
    if cfg.algorithm == "sgd" and graph.n != 1:
        raise ConfigError("serial SGD runs on a single worker; set topology.n = 1", "topology.n")
    weights = cfg.partition.weights or [1.0 / graph.n] * graph.n
    if len(weights) != graph.n:
        raise ConfigError(f"{len(weights)} weights for {graph.n} workers", "partition.weights")
    try:
        policy = tp.SelectionPolicy(np.asarray(weights, dtype=float))
        policy.check(graph)
        partition = pb.partition_data(problem, weights, cfg.partition.strategy, cfg.partition.seed)
    except ValidationError as exc:
        raise ConfigError(str(exc), "partition") from exc
    x0 = initial_model(problem, cfg.problem)
    setup = Setup(cfg, problem, graph, policy, partition, x0, gamma=math.nan)
    if cfg.gamma == "corollary":
        v = setup.variances
        setup.gamma = theory.corollary_gamma(
            graph.n, cfg.batch_size, setup.lipschitz, v.sigma_sq, v.varsigma_sq, cfg.iterations
        )
    else:
        setup.gamma = float(cfg.gamma)
    return setup
