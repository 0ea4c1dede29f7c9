"""Iteration-indexed update rules: AD-PSGD and its baselines.

Models are stored as an ``N x n`` matrix with one column per worker. The
virtual counter ``k`` advances once per stochastic-gradient update, so a
synchronous round over ``n`` workers advances it by ``n``.

Randomness is split into three independent streams (data sampling, worker
selection, staleness draws) so that algorithms which skip selection, such
as serial SGD, consume the data stream identically to AD-PSGD on one worker.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import problems as pb
from . import topology as tp
from .config import RunConfig, Setup, resolve
from .errors import DivergenceError, DriftError, StalenessError, ValidationError
from .metrics import MetricsRecord, MetricsSeries, consensus_Mk

DRIFT_TOL = 1e-9


@dataclass
class Streams:
    data: np.random.Generator
    select: np.random.Generator
    stale: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "Streams":
        a, b, c = np.random.SeedSequence(seed).spawn(3)
        return cls(np.random.default_rng(a), np.random.default_rng(b), np.random.default_rng(c))


class StalenessModel:
    """Serves delayed model snapshots with ``tau_k <= cap``.

    Modes: ``zero`` (always current), ``fixed`` (``min(tau, k)``) and
    ``uniform`` (uniform on ``0..min(cap, k)``).
    """

    def __init__(self, mode: str = "zero", tau: int = 0, cap: int | None = None):
        if mode not in ("zero", "fixed", "uniform"):
            raise ValidationError(f"unknown staleness mode {mode!r}")
        if mode == "zero":
            cap = 0
        elif mode == "fixed":
            cap = tau if not cap else cap
            if tau > cap:
                raise ValidationError(f"fixed staleness {tau} exceeds cap {cap}")
        elif cap is None:
            cap = tau
        self.mode, self.tau, self.cap = mode, tau, int(cap)
        self.history: deque[np.ndarray] = deque(maxlen=self.cap + 1)

    def draw(self, k: int, rng: np.random.Generator) -> int:
        if self.mode == "zero":
            return 0
        if self.mode == "fixed":
            return min(self.tau, k)
        return int(rng.integers(0, min(self.cap, k) + 1))

    def snapshot(self, tau: int, current: np.ndarray) -> np.ndarray:
        """Model matrix ``X_{k - tau}``; ``current`` is ``X_k``."""
        if tau == 0:
            return current
        if tau > self.cap:
            raise StalenessError(f"requested staleness {tau} exceeds cap {self.cap}")
        if tau >= len(self.history):
            raise StalenessError(f"requested staleness {tau} but only {len(self.history)} snapshots retained")
        return self.history[-1 - tau]

    def push(self, X: np.ndarray) -> None:
        if self.cap > 0:
            self.history.append(X.copy())


@dataclass
class Context:
    problem: pb.Problem
    partition: pb.DataPartition
    graph: tp.TopologyGraph
    sampler: tp.PairSampler
    w_sync: np.ndarray | None = None


@dataclass
class AlgoState:
    k: int
    X: np.ndarray
    staleness: StalenessModel
    streams: Streams
    ctx: Context
    updates: np.ndarray = None
    max_tau: int = 0
    last_grad: np.ndarray | None = None
    last_worker: int = -1

    def __post_init__(self):
        if self.updates is None:
            self.updates = np.zeros(self.X.shape[1], dtype=np.int64)
        if self.staleness.cap > 0 and not self.staleness.history:
            self.staleness.push(self.X)

    @property
    def average(self) -> np.ndarray:
        return self.X.mean(axis=1)


def sync_mixing_matrix(graph: tp.TopologyGraph) -> np.ndarray:
    """``I - L / (deg_max + 1)``: symmetric and doubly stochastic."""
    return np.eye(graph.n) - graph.laplacian() / (graph.max_degree + 1)


def make_state(
    problem: pb.Problem,
    partition: pb.DataPartition,
    graph: tp.TopologyGraph,
    x0: np.ndarray,
    seed: int,
    policy: tp.SelectionPolicy | None = None,
    staleness: StalenessModel | None = None,
    spread: float = 0.0,
) -> AlgoState:
    n = graph.n
    X = np.repeat(np.asarray(x0, dtype=float)[:, None], n, axis=1)
    if spread:
        X = X + spread * np.random.default_rng([seed, 3]).standard_normal(X.shape)
    ctx = Context(problem, partition, graph, tp.PairSampler(graph, policy), sync_mixing_matrix(graph))
    return AlgoState(0, X, staleness or StalenessModel(), Streams.from_seed(seed), ctx)


def _check_finite(state: AlgoState, col: np.ndarray | None = None) -> None:
    vals = state.X if col is None else col
    if not np.all(np.isfinite(vals)):
        raise DivergenceError(state.k)


def adpsgd_logical_step(state: AlgoState, gamma: float, M: int, policy: tp.SelectionPolicy | None = None) -> AlgoState:
    """One AD-PSGD update: sample ``i_k`` and a neighbour, read a possibly stale
    ``x^{i_k}``, average the pair, then apply the gradient to ``x^{i_k}``.
    """
    if gamma <= 0:
        raise ValidationError("step size must be positive")
    ctx = state.ctx
    sampler = ctx.sampler if policy is None else tp.PairSampler(ctx.graph, policy)
    i, j = sampler.sample(state.streams.select)
    tau = state.staleness.draw(state.k, state.streams.stale)
    x_hat = state.staleness.snapshot(tau, state.X)[:, i].copy()
    g = pb.sample_gradient(ctx.problem, ctx.partition, i, x_hat, M, state.streams.data)
    X = state.X
    if j >= 0:
        avg = 0.5 * (X[:, i] + X[:, j])
        X[:, i] = avg
        X[:, j] = avg
    X[:, i] -= gamma * g
    state.k += 1
    state.updates[i] += 1
    state.max_tau = max(state.max_tau, tau)
    state.last_grad, state.last_worker = g, i
    state.staleness.push(X)
    _check_finite(state, X[:, i])
    return state


def sgd_step(state: AlgoState, gamma: float, M: int) -> AlgoState:
    ctx = state.ctx
    x = state.X[:, 0]
    g = pb.sample_gradient(ctx.problem, ctx.partition, 0, x.copy(), M, state.streams.data)
    x -= gamma * g
    state.k += 1
    state.updates[0] += 1
    state.last_grad, state.last_worker = g, 0
    _check_finite(state, x)
    return state


def dpsgd_step(state: AlgoState, gamma: float, M: int) -> AlgoState:
    """Synchronous round: ``X <- X W_sync - gamma G`` with gradients at pre-mix models."""
    ctx = state.ctx
    n = state.X.shape[1]
    G = np.empty_like(state.X)
    for i in range(n):
        G[:, i] = pb.sample_gradient(ctx.problem, ctx.partition, i, state.X[:, i], M, state.streams.data)
    state.X = state.X @ ctx.w_sync - gamma * G
    state.k += n
    state.updates += 1
    state.last_grad = G
    _check_finite(state)
    return state


def allreduce_step(state: AlgoState, gamma: float, M: int) -> AlgoState:
    """Every worker contributes a gradient at the shared model; the mean is applied."""
    ctx = state.ctx
    X = state.X
    n = X.shape[1]
    spread = float(np.max(np.abs(X - X[:, :1]))) if n > 1 else 0.0
    if spread > DRIFT_TOL:
        raise DriftError(f"replicas differ by {spread:.3e} at k={state.k}")
    x = X[:, 0].copy()
    total = np.zeros_like(x)
    for i in range(n):
        total += pb.sample_gradient(ctx.problem, ctx.partition, i, x, M, state.streams.data)
    x -= gamma * (total / n)
    state.X = np.repeat(x[:, None], n, axis=1)
    state.k += n
    state.updates += 1
    state.last_grad = total
    _check_finite(state, x)
    return state


def apsgd_step(state: AlgoState, gamma: float, M: int) -> AlgoState:
    """Centralised asynchronous update: one worker's gradient, computed at a
    snapshot at most ``cap`` updates old, is applied to the central model.

    The central model is kept replicated in every column so metrics work
    unchanged.
    """
    ctx = state.ctx
    i = ctx.sampler.sample_worker(state.streams.select)
    tau = state.staleness.draw(state.k, state.streams.stale)
    x_hat = state.staleness.snapshot(tau, state.X)[:, 0].copy()
    g = pb.sample_gradient(ctx.problem, ctx.partition, i, x_hat, M, state.streams.data)
    state.X -= gamma * g[:, None]
    state.k += 1
    state.updates[i] += 1
    state.max_tau = max(state.max_tau, tau)
    state.last_grad, state.last_worker = g, i
    state.staleness.push(state.X)
    _check_finite(state, state.X[:, 0])
    return state


STEPS = {
    "adpsgd": adpsgd_logical_step,
    "sgd": sgd_step,
    "dpsgd": dpsgd_step,
    "allreduce": allreduce_step,
    "apsgd": apsgd_step,
}


def staleness_from_config(cfg: RunConfig) -> StalenessModel:
    s = cfg.staleness
    if cfg.algorithm not in ("adpsgd", "apsgd"):
        return StalenessModel()
    return StalenessModel(s.mode, s.tau, s.cap if s.mode != "zero" else 0)


def state_from_setup(setup: Setup, seed: int) -> AlgoState:
    return make_state(
        setup.problem,
        setup.partition,
        setup.graph,
        setup.x0,
        seed,
        setup.policy,
        staleness_from_config(setup.config),
        setup.config.problem.init_spread,
    )


@dataclass
class Recorder:
    """Samples metrics along a run and keeps the running mean of
    ``||grad f(average model)||^2`` over every virtual iteration."""

    setup: Setup
    series: MetricsSeries
    record_every: int
    target: float | None = None
    grad_sum: float = 0.0
    grad_count: int = 0
    hit_k: int | None = None
    hit_time: float | None = None
    _next: int = field(default=0)

    def observe(self, state: AlgoState, time: float, advance: int = 1, force: bool = False) -> bool:
        """Account for iterations ``k .. k+advance-1``; returns True once the target is met."""
        xbar = state.average
        g = self.setup.problem.full_gradient(xbar)
        gn = float(g @ g)
        loss = None
        if advance > 0:
            self.grad_sum += gn * advance
            self.grad_count += advance
        hit_now = False
        if self.target is not None and self.hit_k is None:
            loss = self.setup.problem.loss(xbar)
            if loss <= self.target:
                self.hit_k, self.hit_time = state.k, time
                hit_now = True
        if force or hit_now or state.k >= self._next:
            if loss is None:
                loss = self.setup.problem.loss(xbar)
            self.series.append(
                MetricsRecord(
                    state.k,
                    time,
                    loss,
                    gn,
                    consensus_Mk(state.X, self.setup.policy.weights),
                    int(state.max_tau),
                    tuple(int(u) for u in state.updates),
                )
            )
            while self._next <= state.k:
                self._next += self.record_every
        return self.hit_k is not None

    @property
    def running_average(self) -> float:
        return self.grad_sum / self.grad_count if self.grad_count else math.nan


def run_logical(config: RunConfig | Setup, seed: int | None = None) -> MetricsSeries:
    """Run ``iterations`` virtual iterations of the configured algorithm.

    The summary holds the final loss and squared gradient norm at the column
    average and ``avg_grad_norm_sq``, the mean of ``||grad f(X_k 1/n)||^2``
    over ``k = 0 .. K-1``.
    """
    setup = config if isinstance(config, Setup) else resolve(config)
    cfg = setup.config
    seed = cfg.seeds[0] if seed is None else seed
    state = state_from_setup(setup, seed)
    step = STEPS[cfg.algorithm]
    K = cfg.iterations
    advance = setup.n if cfg.algorithm in ("dpsgd", "allreduce") else 1
    series = MetricsSeries(setup.n)
    rec = Recorder(setup, series, cfg.record_every, setup.target())
    time = math.nan
    while state.k < K:
        if rec.observe(state, time, advance=min(advance, K - state.k)) and cfg.stop_at_target:
            break
        step(state, setup.gamma, cfg.batch_size)
    rec.observe(state, time, advance=0, force=not series.records or series.records[-1].k != state.k)
    series.summary = _summary(setup, state, rec, seed)
    return series


def _summary(setup: Setup, state: AlgoState, rec: Recorder, seed: int) -> dict:
    xbar = state.average
    g = setup.problem.full_gradient(xbar)
    return {
        "seed": seed,
        "algorithm": setup.config.algorithm,
        "n": setup.n,
        "gamma": setup.gamma,
        "batch_size": setup.M,
        "k": int(state.k),
        "final_loss": setup.problem.loss(xbar),
        "final_grad_norm_sq": float(g @ g),
        "avg_grad_norm_sq": rec.running_average,
        "max_staleness": int(state.max_tau),
        "f0": setup.problem.loss(setup.x0),
        "f_star": setup.problem.f_star,
        "target": rec.target,
        "iterations_to_target": rec.hit_k,
        "worker_updates": [int(u) for u in state.updates],
    }
