"""Communication graphs, pairwise averaging matrices and their spectral analysis.

Workers are indexed ``0..n-1``. A model matrix has one column per worker, so
averaging worker ``i`` with worker ``j`` is the right-multiplication ``X @ W``
by :func:`pair_averaging_matrix`.
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    BoundsError,
    ConnectivityError,
    InvalidMatrixError,
    InvalidPairError,
    InvalidSizeError,
    ValidationError,
)

log = logging.getLogger(__name__)

STOCHASTIC_TOL = 1e-12
EIG_RESIDUAL_TOL = 1e-9


def _norm_edge(i: int, j: int) -> tuple[int, int]:
    return (i, j) if i < j else (j, i)


@dataclass(frozen=True)
class TopologyGraph:
    """Undirected worker graph with an optional active/passive bipartition."""

    n: int
    edges: frozenset[tuple[int, int]]
    active: frozenset[int] | None = None
    passive: frozenset[int] | None = None
    name: str = "custom"
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.n < 1:
            raise InvalidSizeError(f"worker count must be positive, got {self.n}")
        norm = set()
        for e in self.edges:
            i, j = int(e[0]), int(e[1])
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise BoundsError(f"edge {e} has an endpoint outside [0, {self.n})")
            if i == j:
                raise ValidationError(f"self-loop on worker {i}")
            norm.add(_norm_edge(i, j))
        object.__setattr__(self, "edges", frozenset(norm))
        if (self.active is None) != (self.passive is None):
            raise ValidationError("active and passive sets must be given together")
        if self.active is not None:
            a, p = frozenset(self.active), frozenset(self.passive)
            object.__setattr__(self, "active", a)
            object.__setattr__(self, "passive", p)
            if a & p:
                raise ValidationError(f"active and passive sets overlap: {sorted(a & p)}")
            if a | p != frozenset(range(self.n)):
                raise ValidationError("active and passive sets must cover every worker")
            for i, j in self.edges:
                if (i in a) == (j in a):
                    raise ValidationError(f"edge {(i, j)} does not join an active and a passive worker")

    @cached_property
    def neighbors(self) -> tuple[tuple[int, ...], ...]:
        adj: list[list[int]] = [[] for _ in range(self.n)]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        return tuple(tuple(sorted(a)) for a in adj)

    def degree(self, i: int) -> int:
        return len(self.neighbors[i])

    @property
    def max_degree(self) -> int:
        return max((len(a) for a in self.neighbors), default=0)

    @property
    def has_partition(self) -> bool:
        return self.active is not None

    def role(self, i: int) -> str:
        if self.active is None:
            return "active"
        return "active" if i in self.active else "passive"

    def is_connected(self) -> bool:
        seen = {0}
        queue = deque([0])
        while queue:
            u = queue.popleft()
            for v in self.neighbors[u]:
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
        return len(seen) == self.n

    def laplacian(self) -> np.ndarray:
        lap = np.zeros((self.n, self.n))
        for i, j in self.edges:
            lap[i, j] = lap[j, i] = -1.0
        lap[np.diag_indices(self.n)] = [len(a) for a in self.neighbors]
        return lap

    def with_partition(self, active: Iterable[int], passive: Iterable[int]) -> "TopologyGraph":
        return TopologyGraph(self.n, self.edges, frozenset(active), frozenset(passive), self.name, self.warnings)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "edges": [list(e) for e in sorted(self.edges)],
            "active": sorted(self.active) if self.active is not None else None,
            "passive": sorted(self.passive) if self.passive is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict, name: str = "file") -> "TopologyGraph":
        try:
            n = int(d["n"])
            edges = frozenset(_norm_edge(int(a), int(b)) for a, b in d.get("edges", []))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed topology document: {exc}") from exc
        active, passive = d.get("active"), d.get("passive")
        if active is not None or passive is not None:
            active, passive = frozenset(active or ()), frozenset(passive or ())
        return cls(n, edges, active, passive, name)

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "TopologyGraph":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from exc
        return cls.from_dict(doc, name=Path(path).stem)


def _parity_partition(n: int, edges: Iterable[tuple[int, int]]):
    """Even/odd split, or None if some edge joins two workers of equal parity."""
    if any((i - j) % 2 == 0 for i, j in edges):
        return None
    return frozenset(range(0, n, 2)), frozenset(range(1, n, 2))


def _single(n: int, name: str) -> TopologyGraph:
    return TopologyGraph(1, frozenset(), frozenset({0}), frozenset(), name)


def build_ring(n: int) -> TopologyGraph:
    """Cycle ``j -- j+1 (mod n)``; parity bipartition whenever ``n`` is even."""
    if n < 1:
        raise InvalidSizeError(f"ring needs at least 1 worker, got {n}")
    if n == 1:
        return _single(n, "ring")
    edges = frozenset(_norm_edge(j, (j + 1) % n) for j in range(n))
    part = _parity_partition(n, edges) if n % 2 == 0 else None
    if part is None:
        return TopologyGraph(n, edges, name="ring")
    return TopologyGraph(n, edges, part[0], part[1], name="ring")


def skip_offsets(n: int) -> list[int]:
    """Hop distances ``2**i + 1`` for ``0 <= i <= floor(log2(n-1))``."""
    if n < 2:
        return []
    return [2**i + 1 for i in range(int(math.floor(math.log2(n - 1))) + 1)]


def build_skip_ring(n: int, deadlock_free: bool = False) -> TopologyGraph:
    """Ring with chords to workers ``2**i + 1`` hops away.

    With ``deadlock_free=True`` even hop distances are discarded because they
    join workers of equal parity; the dropped offsets are listed in
    ``graph.warnings``. Odd ``n`` never admits the parity bipartition.
    """
    if n < 1:
        raise InvalidSizeError(f"skip ring needs at least 1 worker, got {n}")
    if n == 1:
        return _single(n, "skip-ring")
    offsets = skip_offsets(n)
    notes = []
    if deadlock_free:
        dropped = [o for o in offsets if o % 2 == 0]
        offsets = [o for o in offsets if o % 2 == 1]
        if dropped:
            notes.append(f"dropped even skip offsets {dropped} to keep the parity bipartition")
    edges = set()
    for o in offsets:
        for j in range(n):
            t = (j + o) % n
            if t != j:
                edges.add(_norm_edge(j, t))
    if not edges:
        edges.add((0, 1))
        notes.append("no usable skip offset; fell back to the single edge (0, 1)")
    if deadlock_free and n % 2 == 1:
        notes.append(f"odd worker count {n} cannot be split by parity")
    for msg in notes:
        log.warning("skip-ring n=%d: %s", n, msg)
    part = _parity_partition(n, edges) if n % 2 == 0 else None
    a, p = part if part is not None else (None, None)
    return TopologyGraph(n, frozenset(edges), a, p, "skip-ring", tuple(notes))


def build_complete(n: int) -> TopologyGraph:
    edges = frozenset((i, j) for i in range(n) for j in range(i + 1, n))
    if n == 1:
        return _single(n, "complete")
    return TopologyGraph(n, edges, name="complete")


def build_complete_bipartite(a: int, b: int) -> TopologyGraph:
    n = a + b
    edges = frozenset((i, a + j) for i in range(a) for j in range(b))
    return TopologyGraph(n, edges, frozenset(range(a)), frozenset(range(a, n)), "complete-bipartite")


def two_coloring(graph: TopologyGraph) -> tuple[list[int] | None, tuple[int, ...] | None]:
    """BFS 2-coloring. Returns ``(colors, None)`` or ``(None, odd_cycle)``.

    The odd cycle is rotated to start at its smallest worker and oriented so
    that its second element is the smaller of the two neighbours.
    """
    color = [-1] * graph.n
    parent = [-1] * graph.n
    depth = [0] * graph.n
    for root in range(graph.n):
        if color[root] >= 0:
            continue
        color[root] = 0
        queue = deque([root])
        while queue:
            u = queue.popleft()
            for v in graph.neighbors[u]:
                if color[v] < 0:
                    color[v] = 1 - color[u]
                    parent[v] = u
                    depth[v] = depth[u] + 1
                    queue.append(v)
                elif color[v] == color[u]:
                    return None, _odd_cycle(u, v, parent, depth)
    return color, None


def _odd_cycle(u: int, v: int, parent: list[int], depth: list[int]) -> tuple[int, ...]:
    pu, pv = [u], [v]
    while depth[pu[-1]] > depth[pv[-1]]:
        pu.append(parent[pu[-1]])
    while depth[pv[-1]] > depth[pu[-1]]:
        pv.append(parent[pv[-1]])
    while pu[-1] != pv[-1]:
        pu.append(parent[pu[-1]])
        pv.append(parent[pv[-1]])
    cycle = pu[::-1] + pv[:-1]
    k = cycle.index(min(cycle))
    cycle = cycle[k:] + cycle[:k]
    if len(cycle) > 2 and cycle[-1] < cycle[1]:
        cycle = [cycle[0]] + cycle[1:][::-1]
    return tuple(cycle)


@dataclass(frozen=True)
class SelectionPolicy:
    """Worker-selection law: ``i ~ weights``, then a uniform neighbour of ``i``."""

    weights: np.ndarray
    neighbor_rule: str = "uniform"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise ValidationError("worker weights must be a nonempty vector")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValidationError("worker weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValidationError(f"worker weights sum to {w.sum()}, expected 1")
        if self.neighbor_rule != "uniform":
            raise ValidationError(f"unknown neighbour rule {self.neighbor_rule!r}")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, n: int) -> "SelectionPolicy":
        return cls(np.full(n, 1.0 / n))

    def check(self, graph: TopologyGraph) -> None:
        if self.weights.size != graph.n:
            raise ValidationError(f"policy has {self.weights.size} weights for {graph.n} workers")
        if graph.n == 1:
            return
        for i, p in enumerate(self.weights):
            if p > 0 and graph.degree(i) == 0:
                raise ValidationError(f"worker {i} has positive weight but no neighbours")


def pair_averaging_matrix(i: int, j: int, n: int) -> np.ndarray:
    """Identity except that workers ``i`` and ``j`` are replaced by their mean."""
    if not (0 <= i < n and 0 <= j < n):
        raise BoundsError(f"pair ({i}, {j}) outside [0, {n})")
    if i == j:
        raise InvalidPairError(f"cannot average worker {i} with itself")
    w = np.eye(n)
    w[i, i] = w[j, j] = w[i, j] = w[j, i] = 0.5
    return w


def is_doubly_stochastic(w: np.ndarray, tol: float = STOCHASTIC_TOL) -> bool:
    """Also accepts a stack of matrices with shape ``(..., n, n)``."""
    w = np.asarray(w)
    return bool(
        np.all(w >= 0)
        and np.all(np.abs(w.sum(axis=-1) - 1.0) <= tol)
        and np.all(np.abs(w.sum(axis=-2) - 1.0) <= tol)
    )


class PairSampler:
    """Draws ``(i_k, neighbour)`` pairs under a selection policy.

    For an isolated single worker the neighbour is ``-1`` and the averaging
    step is the identity.
    """

    def __init__(self, graph: TopologyGraph, policy: SelectionPolicy | None = None):
        policy = policy or SelectionPolicy.uniform(graph.n)
        policy.check(graph)
        self.graph = graph
        self.policy = policy
        self._cdf = np.cumsum(policy.weights)
        self._cdf[-1] = 1.0
        self._deg = np.array([graph.degree(i) for i in range(graph.n)])
        width = max(1, int(self._deg.max(initial=0)))
        self._table = np.full((graph.n, width), -1, dtype=np.int64)
        for i, nb in enumerate(graph.neighbors):
            self._table[i, : len(nb)] = nb

    def sample_worker(self, rng: np.random.Generator) -> int:
        return int(np.searchsorted(self._cdf, rng.random(), side="right"))

    def sample_neighbor(self, i: int, rng: np.random.Generator) -> int:
        nb = self.graph.neighbors[i]
        if not nb:
            return -1
        return nb[int(rng.integers(len(nb)))]

    def sample(self, rng: np.random.Generator) -> tuple[int, int]:
        i = self.sample_worker(rng)
        return i, self.sample_neighbor(i, rng)

    def sample_many(self, rng: np.random.Generator, count: int) -> tuple[np.ndarray, np.ndarray]:
        workers = np.searchsorted(self._cdf, rng.random(count), side="right")
        slot = np.floor(rng.random(count) * np.maximum(self._deg[workers], 1)).astype(np.int64)
        return workers, self._table[workers, slot]


def averaging_matrices(workers: np.ndarray, partners: np.ndarray, n: int) -> np.ndarray:
    """Stack of pair-averaging matrices, shape ``(len(workers), n, n)``."""
    count = len(workers)
    w = np.broadcast_to(np.eye(n), (count, n, n)).copy()
    idx = np.arange(count)
    ok = partners >= 0
    i, j, r = workers[ok], partners[ok], idx[ok]
    w[r, i, i] = w[r, j, j] = w[r, i, j] = w[r, j, i] = 0.5
    return w


def expected_gram(graph: TopologyGraph, policy: SelectionPolicy | None = None) -> np.ndarray:
    """Exact ``E[W^T W]`` by enumerating every (worker, neighbour) choice."""
    n = graph.n
    policy = policy or SelectionPolicy.uniform(n)
    policy.check(graph)
    if n == 1:
        return np.ones((1, 1))
    if not graph.is_connected():
        raise ConnectivityError(f"graph '{graph.name}' with {n} workers is not connected")
    gram = np.zeros((n, n))
    for i in range(n):
        nb = graph.neighbors[i]
        if policy.weights[i] == 0 or not nb:
            continue
        prob = policy.weights[i] / len(nb)
        for j in nb:
            w = pair_averaging_matrix(i, j, n)
            gram += prob * (w.T @ w)
    return gram


def spectral_gap(gram: np.ndarray) -> float:
    """``max(|lambda_2|, |lambda_n|)`` of a symmetric doubly stochastic matrix."""
    a = np.asarray(gram, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidMatrixError(f"expected a square matrix, got shape {a.shape}")
    if not np.allclose(a, a.T, atol=1e-10, rtol=0):
        raise InvalidMatrixError("matrix is not symmetric")
    if a.shape[0] == 1:
        return 0.0
    vals, vecs = np.linalg.eigh(a)
    resid = np.linalg.norm(a @ vecs - vecs * vals, axis=0)
    if np.any(resid > EIG_RESIDUAL_TOL * max(1.0, np.linalg.norm(a, 2))):
        raise InvalidMatrixError(f"eigensolver residual too large: {resid.max():.3e}")
    vals = np.sort(vals)[::-1]
    return float(max(abs(vals[1]), abs(vals[-1])))


@dataclass(frozen=True)
class SpectralReport:
    expected_gram: np.ndarray
    rho: float
    bar_rho: float


def analyze(graph: TopologyGraph, policy: SelectionPolicy | None = None) -> SpectralReport:
    from .theory import bar_rho

    gram = expected_gram(graph, policy)
    rho = spectral_gap(gram)
    return SpectralReport(gram, rho, bar_rho(rho, graph.n) if rho < 1 else math.inf)


def consensus_decay(
    graph: TopologyGraph,
    ks: Sequence[int],
    trials: int,
    rng: np.random.Generator,
    worker: int = 0,
    policy: SelectionPolicy | None = None,
) -> dict[int, tuple[float, float]]:
    """Monte-Carlo ``E||1/n - W_1...W_K e_i||^2`` with its standard error, per K.

    Products of i.i.d. factors have the same law in either order, so each
    trial applies freshly sampled pair averages to ``e_i`` one at a time.
    """
    n = graph.n
    sampler = PairSampler(graph, policy)
    y = np.zeros((trials, n))
    y[:, worker] = 1.0
    rows = np.arange(trials)
    out = {}
    wanted = set(int(k) for k in ks)
    for k in range(0, max(wanted, default=0) + 1):
        if k > 0:
            i, j = sampler.sample_many(rng, trials)
            ok = j >= 0
            mean = 0.5 * (y[rows[ok], i[ok]] + y[rows[ok], j[ok]])
            y[rows[ok], i[ok]] = mean
            y[rows[ok], j[ok]] = mean
        if k in wanted:
            d = np.sum((1.0 / n - y) ** 2, axis=1)
            out[k] = (float(d.mean()), float(d.std(ddof=1) / math.sqrt(trials)))
    return out
