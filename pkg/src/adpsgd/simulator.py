"""Discrete-event simulation of wall-clock AD-PSGD and synchronous baselines.

Each worker runs two logical threads sharing a one-slot gradient buffer:

* the compute thread reads the model, computes a batch gradient and deposits
  it in the buffer, blocking while the buffer is still full;
* the communication thread flushes the buffer into the model and, on active
  workers, then averages with a uniformly chosen passive neighbour.

Averaging freezes both endpoints for the duration of the exchange and sets
both to the pair mean when it completes. Passive workers serve averaging
requests one at a time in FIFO order. Everything runs in a single-threaded
event loop ordered by ``(time, sequence)``.
"""

from __future__ import annotations

import heapq
import json
import math
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import algorithms as alg
from . import problems as pb
from . import topology as tp
from .config import RunConfig, Setup, resolve
from .errors import DeadlockError, DivergenceError, ValidationError
from .metrics import MetricsSeries

GRADIENT_READY = "gradient-ready"
AVERAGING_REQUEST = "averaging-request"
AVERAGING_COMPLETE = "averaging-complete"
BUFFER_FLUSH = "buffer-flush"


@dataclass(frozen=True)
class Slowdown:
    target: str
    index: int | tuple[int, int]
    factor: float
    start: float = 0.0
    end: float = math.inf

    def __post_init__(self):
        if self.factor < 1:
            raise ValidationError(f"slowdown factor must be >= 1, got {self.factor}")
        if self.target not in ("worker", "edge"):
            raise ValidationError(f"slowdown target must be 'worker' or 'edge', got {self.target!r}")
        if self.target == "edge":
            a, b = self.index
            object.__setattr__(self, "index", (min(a, b), max(a, b)))

    def active(self, t: float) -> bool:
        return self.start <= t < self.end


@dataclass
class SpeedModel:
    compute_time: np.ndarray
    link_time: float = 0.0
    slowdowns: list[Slowdown] = field(default_factory=list)

    def __post_init__(self):
        self.compute_time = np.asarray(self.compute_time, dtype=float)
        if np.any(self.compute_time <= 0):
            raise ValidationError("compute times must be positive")
        if self.link_time < 0:
            raise ValidationError("link time must be nonnegative")

    @classmethod
    def uniform(cls, n: int, compute: float = 1.0, link: float = 0.0, slowdowns=()) -> "SpeedModel":
        return cls(np.full(n, float(compute)), float(link), list(slowdowns))

    def _factor(self, target: str, key, t: float) -> float:
        f = 1.0
        for s in self.slowdowns:
            if s.target == target and s.index == key and s.active(t):
                f *= s.factor
        return f

    def compute_duration(self, i: int, t: float) -> float:
        return float(self.compute_time[i]) * self._factor("worker", i, t)

    def link_duration(self, i: int, j: int, t: float) -> float:
        return self.link_time * self._factor("edge", (min(i, j), max(i, j)), t)


def speed_from_config(cfg: RunConfig, n: int) -> SpeedModel:
    sp = cfg.speed
    ct = sp.compute_time
    compute = np.asarray(ct if isinstance(ct, list) else [ct] * n, dtype=float)
    if compute.size != n:
        raise ValidationError(f"{compute.size} compute times for {n} workers")
    slow = [
        Slowdown(s.target, tuple(s.index) if isinstance(s.index, list) else int(s.index), s.factor, s.start, s.end)
        for s in sp.slowdown
    ]
    return SpeedModel(compute, sp.link_time, slow)


class EventTrace:
    """Ordered record of processed events; serialises to JSON lines."""

    def __init__(self):
        self.records: list[dict] = []

    def add(self, rec: dict) -> None:
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def of_kind(self, kind: str) -> list[dict]:
        return [r for r in self.records if r["kind"] == kind]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "EventTrace":
        tr = cls()
        for line in text.splitlines():
            if line.strip():
                tr.add(json.loads(line))
        return tr


@dataclass
class WorkerRuntime:
    index: int
    role: str
    x: np.ndarray
    data_rng: np.random.Generator
    select_rng: np.random.Generator
    g: np.ndarray | None = None
    g_read_k: int = 0
    pending: tuple[np.ndarray, int] | None = None
    compute_x: np.ndarray | None = None
    compute_read_k: int = 0
    compute_start: float = 0.0
    comm: str = "idle"
    locked: bool = False
    waiting_on: int | None = None
    queue: deque = field(default_factory=deque)
    updates: int = 0


@dataclass(frozen=True)
class DeadlockVerdict:
    deadlock_free: bool
    active: frozenset[int] | None
    passive: frozenset[int] | None
    odd_cycle: tuple[int, ...] | None


def detect_deadlock_freedom(graph: tp.TopologyGraph) -> DeadlockVerdict:
    """Deadlock-free iff some active/passive split puts every edge across it."""
    colors, cycle = tp.two_coloring(graph)
    if colors is None:
        return DeadlockVerdict(False, None, None, cycle)
    active = frozenset(i for i, c in enumerate(colors) if c == 0)
    return DeadlockVerdict(True, active, frozenset(range(graph.n)) - active, None)


class _View:
    """Adapter exposing simulator state to :class:`algorithms.Recorder`."""

    def __init__(self, sim: "Simulator"):
        self.sim = sim

    @property
    def X(self):
        return np.column_stack([w.x for w in self.sim.workers])

    @property
    def average(self):
        return np.mean([w.x for w in self.sim.workers], axis=0)

    @property
    def k(self):
        return self.sim.k

    @property
    def max_tau(self):
        return self.sim.max_tau

    @property
    def updates(self):
        return [w.updates for w in self.sim.workers]


class Simulator:
    """Event loop for the wait-free two-thread protocol.

    ``protocol`` selects how averaging is coordinated: ``bipartite`` (active
    workers pull from passive ones), ``serialized`` (one exchange at a time
    system-wide, for non-bipartite graphs) or ``naive`` (every worker
    initiates and blocks, which can deadlock; kept to demonstrate the hazard).
    """

    def __init__(
        self,
        setup: Setup,
        speed: SpeedModel,
        seed: int,
        protocol: str = "bipartite",
        local_update: bool = True,
        record_trace: bool = True,
        on_event: Callable[["Simulator", dict], None] | None = None,
    ):
        self.setup = setup
        self.problem, self.partition = setup.problem, setup.partition
        self.graph = setup.graph
        self.gamma, self.M = setup.gamma, setup.M
        self.speed = speed
        self.protocol = protocol
        self.local_update = local_update
        self.on_event = on_event
        self.trace = EventTrace() if record_trace else None
        self.k = 0
        self.max_tau = 0
        self.now = 0.0
        self._heap: list = []
        self._seq = 0
        self._global_queue: deque = deque()
        self._channel_busy = False
        roles = self._roles()
        self.workers = [
            WorkerRuntime(
                i,
                roles[i],
                np.array(setup.x0, dtype=float),
                np.random.default_rng([seed, i, 0]),
                np.random.default_rng([seed, i, 1]),
            )
            for i in range(self.graph.n)
        ]
        spread = setup.config.problem.init_spread
        if spread:
            noise = np.random.default_rng([seed, 3]).standard_normal((setup.x0.size, self.graph.n))
            for w in self.workers:
                w.x = w.x + spread * noise[:, w.index]

    def _roles(self) -> list[str]:
        n = self.graph.n
        if self.protocol in ("serialized", "naive"):
            return ["active"] * n
        if self.protocol != "bipartite":
            raise ValidationError(f"unknown protocol {self.protocol!r}")
        graph = self.graph
        if not graph.has_partition:
            verdict = detect_deadlock_freedom(graph)
            if not verdict.deadlock_free:
                raise ValidationError(
                    f"graph has odd cycle {verdict.odd_cycle}; bipartite protocol impossible, "
                    "use the serialized protocol"
                )
            graph = graph.with_partition(verdict.active, verdict.passive)
            self.graph = graph
        return [graph.role(i) for i in range(n)]

    def _schedule(self, t: float, kind: str, worker: int, peer: int = -1) -> None:
        heapq.heappush(self._heap, (t, self._seq, kind, worker, peer))
        self._seq += 1

    def _log(self, seq: int, kind: str, worker: int, peer: int = -1, **extra) -> dict:
        rec = {"seq": seq, "time": self.now, "kind": kind, "worker": worker, "peer": peer, "k": self.k}
        rec.update(extra)
        if self.trace is not None:
            self.trace.add(rec)
        if self.on_event is not None:
            self.on_event(self, rec)
        return rec

    def _start_compute(self, w: WorkerRuntime) -> None:
        x = w.x.copy()
        read_k = self.k
        if self.local_update and w.g is not None:
            # The buffered update is already visible to this read.
            x -= self.gamma * w.g
            read_k += 1
        w.compute_x, w.compute_read_k, w.compute_start = x, read_k, self.now
        self._schedule(self.now + self.speed.compute_duration(w.index, self.now), GRADIENT_READY, w.index)

    def _poke(self, w: WorkerRuntime) -> None:
        """The communication thread looks for work: flush first, then serve."""
        if w.comm != "idle" or w.locked:
            return
        if w.g is not None:
            w.comm = "flush"
            seq = self._seq
            self._seq += 1
            self._on_flush(w, seq)
        elif w.queue and self.protocol != "serialized":
            self._start_exchange(w.queue.popleft(), w.index)

    def _start_exchange(self, i: int, j: int) -> None:
        wi, wj = self.workers[i], self.workers[j]
        wi.locked = wj.locked = True
        if self.protocol != "serialized":
            wj.comm = "exchange"
        self._schedule(self.now + self.speed.link_duration(i, j, self.now), AVERAGING_COMPLETE, i, j)

    def _unlock(self, w: WorkerRuntime, initiator: bool) -> None:
        w.locked = False
        if initiator or w.comm in ("exchange", "deferred"):
            w.comm = "idle"
        if initiator:
            w.waiting_on = None
        self._poke(w)

    def _on_gradient_ready(self, w: WorkerRuntime, seq: int) -> None:
        grad = pb.sample_gradient(self.problem, self.partition, w.index, w.compute_x, self.M, w.data_rng)
        self._log(seq, GRADIENT_READY, w.index, start=w.compute_start, read_k=w.compute_read_k,
                  blocked=w.g is not None)
        if w.g is None:
            w.g, w.g_read_k = grad, w.compute_read_k
            self._start_compute(w)
            self._poke(w)
        else:
            w.pending = (grad, w.compute_read_k)

    def _on_flush(self, w: WorkerRuntime, seq: int) -> None:
        if w.locked:
            w.comm = "deferred"
            return
        tau = self.k - w.g_read_k
        self.recorder.observe(self.view, self.now, advance=1)
        w.x -= self.gamma * w.g
        w.g = None
        if not np.all(np.isfinite(w.x)):
            raise DivergenceError(self.k, f"worker {w.index} model is not finite")
        self.k += 1
        w.updates += 1
        self.max_tau = max(self.max_tau, tau)
        self._log(seq, BUFFER_FLUSH, w.index, tau=tau, read_k=w.g_read_k)
        if w.pending is not None:
            w.g, w.g_read_k = w.pending
            w.pending = None
            self._start_compute(w)
        neighbors = self.graph.neighbors[w.index]
        if w.role == "active" and neighbors:
            j = neighbors[int(w.select_rng.integers(len(neighbors)))]
            w.comm = "waiting"
            w.waiting_on = j
            self._schedule(self.now, AVERAGING_REQUEST, w.index, j)
        else:
            w.comm = "idle"
            self._poke(w)

    def _on_request(self, i: int, j: int, seq: int) -> None:
        self._log(seq, AVERAGING_REQUEST, i, j)
        if self.protocol == "serialized":
            self._global_queue.append((i, j))
            self._next_serialized()
            return
        wj = self.workers[j]
        if wj.comm == "idle" and not wj.locked:
            self._start_exchange(i, j)
        else:
            wj.queue.append(i)

    def _next_serialized(self) -> None:
        if self._channel_busy or not self._global_queue:
            return
        i, j = self._global_queue.popleft()
        self._channel_busy = True
        self._start_exchange(i, j)

    def _on_complete(self, i: int, j: int, seq: int) -> None:
        wi, wj = self.workers[i], self.workers[j]
        avg = 0.5 * (wi.x + wj.x)
        wi.x = avg
        wj.x = avg.copy()
        self._log(seq, AVERAGING_COMPLETE, i, j)
        self._unlock(wi, True)
        self._unlock(wj, False)
        if self.protocol == "serialized":
            self._channel_busy = False
            self._next_serialized()

    def run(self, horizon: float | None, max_k: int | None, stop_at_target: bool = False) -> None:
        horizon = math.inf if horizon is None else horizon
        max_k = math.inf if max_k is None else max_k
        cfg = self.setup.config
        self.series = MetricsSeries(self.graph.n)
        self.recorder = alg.Recorder(self.setup, self.series, cfg.record_every, self.setup.target())
        self.view = _View(self)
        self.stopped_by = "horizon"
        for w in self.workers:
            self._start_compute(w)
        while self.k < max_k:
            if not self._heap:
                waits = {w.index: w.waiting_on for w in self.workers if w.waiting_on is not None}
                raise DeadlockError(self.now, waits)
            t, seq, kind, worker, peer = self._heap[0]
            if t > horizon:
                break
            heapq.heappop(self._heap)
            self.now = t
            w = self.workers[worker]
            if kind == GRADIENT_READY:
                self._on_gradient_ready(w, seq)
            elif kind == AVERAGING_REQUEST:
                self._on_request(worker, peer, seq)
            else:
                self._on_complete(worker, peer, seq)
            if stop_at_target and self.recorder.hit_k is not None:
                self.stopped_by = "target"
                break
        else:
            self.stopped_by = "iterations"
        if self.stopped_by == "horizon" and math.isfinite(horizon):
            self.now = horizon
        last = self.series.records[-1] if self.series.records else None
        fresh = last is None or (last.k, last.simulated_time) != (self.k, self.now)
        self.recorder.observe(self.view, self.now, advance=0, force=fresh)


def epoch_updates(setup: Setup) -> float:
    """Gradient updates per epoch-equivalent: ``n * S / M``."""
    return setup.n * setup.problem.num_samples / setup.M


def _timed_summary(setup: Setup, xbar, k: int, now: float, recorder, updates, seed: int, max_tau: int) -> dict:
    prob = setup.problem
    g = prob.full_gradient(xbar)
    per_epoch = epoch_updates(setup)
    return {
        "seed": seed,
        "algorithm": setup.config.algorithm,
        "mode": setup.config.mode,
        "n": setup.n,
        "gamma": setup.gamma,
        "batch_size": setup.M,
        "k": int(k),
        "simulated_time": now,
        "final_loss": prob.loss(xbar),
        "final_grad_norm_sq": float(g @ g),
        "avg_grad_norm_sq": recorder.running_average,
        "max_staleness": int(max_tau),
        "f0": prob.loss(setup.x0),
        "f_star": prob.f_star,
        "target": recorder.target,
        "iterations_to_target": recorder.hit_k,
        "time_to_target": recorder.hit_time,
        "worker_updates": [int(u) for u in updates],
        "empirical_p": [u / k if k else 0.0 for u in updates],
        "updates_per_epoch": per_epoch,
        "epoch_time": now * per_epoch / k if k else math.inf,
    }


def simulate(
    config: RunConfig | Setup,
    seed: int | None = None,
    speed: SpeedModel | None = None,
    on_event: Callable[[Simulator, dict], None] | None = None,
) -> tuple[MetricsSeries, EventTrace]:
    """Run the wait-free AD-PSGD protocol until the horizon or iteration budget."""
    setup = config if isinstance(config, Setup) else resolve(config)
    cfg = setup.config
    seed = cfg.seeds[0] if seed is None else seed
    speed = speed or speed_from_config(cfg, setup.n)
    sim = Simulator(setup, speed, seed, cfg.speed.protocol, cfg.speed.local_update, cfg.output.trace, on_event)
    sim.run(cfg.horizon, cfg.iterations, cfg.stop_at_target)
    series = sim.series
    series.summary = _timed_summary(
        setup, sim.view.average, sim.k, sim.now, sim.recorder, [w.updates for w in sim.workers], seed, sim.max_tau
    )
    series.summary["stopped_by"] = sim.stopped_by
    if setup.graph.warnings:
        series.summary["topology_warnings"] = list(setup.graph.warnings)
    return series, sim.trace if sim.trace is not None else EventTrace()


def sync_cost(setup: Setup, speed: SpeedModel, algorithm: str, t: float) -> float:
    """Synchronisation time of one round.

    AllReduce: ``alpha * n + beta * model_size``. D-PSGD: the slowest
    neighbour exchange.
    """
    cfg = setup.config
    if algorithm == "allreduce":
        return cfg.speed.allreduce_alpha * setup.n + cfg.speed.allreduce_beta * setup.problem.dim
    return max((speed.link_duration(i, j, t) for i, j in setup.graph.edges), default=0.0)


def simulate_synchronous(
    config: RunConfig | Setup,
    algorithm: str | None = None,
    seed: int | None = None,
    speed: SpeedModel | None = None,
) -> tuple[MetricsSeries, EventTrace]:
    """Barrier-synchronised rounds: every round waits for the slowest worker."""
    setup = config if isinstance(config, Setup) else resolve(config)
    cfg = setup.config
    algorithm = algorithm or cfg.algorithm
    if algorithm not in ("allreduce", "dpsgd"):
        raise ValidationError(f"synchronous timing supports allreduce and dpsgd, not {algorithm!r}")
    seed = cfg.seeds[0] if seed is None else seed
    speed = speed or speed_from_config(cfg, setup.n)
    step = alg.STEPS[algorithm]
    state = alg.state_from_setup(setup, seed)
    horizon = math.inf if cfg.horizon is None else cfg.horizon
    max_k = math.inf if cfg.iterations is None else cfg.iterations
    series = MetricsSeries(setup.n)
    rec = alg.Recorder(setup, series, cfg.record_every, setup.target())
    trace = EventTrace()
    seq = 0
    now = 0.0
    n = setup.n
    stopped_by = "horizon"
    while state.k < max_k:
        durations = [speed.compute_duration(i, now) for i in range(n)]
        round_time = max(durations) + sync_cost(setup, speed, algorithm, now)
        if now + round_time > horizon:
            break
        if rec.observe(state, now, advance=n) and cfg.stop_at_target:
            stopped_by = "target"
            break
        step(state, setup.gamma, setup.M)
        if cfg.output.trace:
            for i, d in enumerate(durations):
                trace.add({"seq": seq, "time": now + d, "kind": GRADIENT_READY, "worker": i, "peer": -1,
                           "k": state.k - n, "start": now})
                seq += 1
            trace.add({"seq": seq, "time": now + round_time, "kind": AVERAGING_COMPLETE, "worker": -1,
                       "peer": -1, "k": state.k, "round_time": round_time})
            seq += 1
        now += round_time
    else:
        stopped_by = "iterations"
    last = series.records[-1] if series.records else None
    rec.observe(state, now, advance=0, force=last is None or (last.k, last.simulated_time) != (state.k, now))
    series.summary = _timed_summary(setup, state.average, state.k, now, rec, state.updates, seed, 0)
    series.summary["stopped_by"] = stopped_by
    series.summary["algorithm"] = algorithm
    return series, trace


def staleness_profile(trace: EventTrace, cap: int | None = None) -> dict:
    """Summary of emergent staleness from the buffer-flush records."""
    flushes = trace.of_kind(BUFFER_FLUSH)
    if not flushes:
        raise ValidationError("trace contains no buffer flushes")
    taus = [r["tau"] for r in flushes]
    per_worker: dict[int, int] = {}
    for r in flushes:
        per_worker[r["worker"]] = max(per_worker.get(r["worker"], 0), r["tau"])
    out = {
        "max": max(taus),
        "mean": float(np.mean(taus)),
        "histogram": dict(sorted(Counter(taus).items())),
        "per_worker_max": dict(sorted(per_worker.items())),
        "count": len(taus),
    }
    if cap is not None:
        out["cap"] = cap
        out["within_cap"] = out["max"] <= cap
    return out
