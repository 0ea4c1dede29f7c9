"""Objectives, stochastic gradient oracles and data partitioning.

Every problem is a finite sum ``f(x) = (1/S) sum_s F(x; s)``. Stochastic
gradients follow the batch-sum convention: a batch of ``M`` samples returns
``sum_m grad F(x; xi_m)``, not the mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InsufficientDataError, ValidationError

SHARED = "shared"
SPLIT = "split"


def _sym_sqrt(h: np.ndarray, inverse: bool = False) -> np.ndarray:
    vals, vecs = np.linalg.eigh(h)
    vals = np.clip(vals, 0.0, None)
    d = 1.0 / np.sqrt(vals) if inverse else np.sqrt(vals)
    return (vecs * d) @ vecs.T


class Problem:
    """Base class. Subclasses supply ``sample_gradients`` and ``loss``."""

    kind = "abstract"
    dim: int
    num_samples: int
    f_star: float | None = None
    optimum: np.ndarray | None = None

    def loss(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def sample_gradients(self, x: np.ndarray, idx: np.ndarray) -> np.ndarray:
        """Per-sample gradients, shape ``(len(idx), dim)``."""
        raise NotImplementedError

    def full_gradient(self, x: np.ndarray) -> np.ndarray:
        return self.sample_gradients(x, np.arange(self.num_samples)).mean(axis=0)

    def batch_gradient(self, x: np.ndarray, idx: np.ndarray) -> np.ndarray:
        return self.sample_gradients(x, idx).sum(axis=0)

    def shard_gradient(self, x: np.ndarray, shard: np.ndarray) -> np.ndarray:
        return self.sample_gradients(x, shard).mean(axis=0)

    def lipschitz(self) -> float:
        raise NotImplementedError

    @property
    def f_star_bound(self) -> float:
        """``f*`` when known, otherwise 0 (all losses here are nonnegative)."""
        return self.f_star if self.f_star is not None else 0.0


class QuadraticProblem(Problem):
    """``f(x) = (1/S) sum_s 0.5 * ||A_s x - b_s||^2`` with ``A`` of shape ``(S, m, N)``."""

    kind = "quadratic"

    def __init__(self, A, b):
        A = np.asarray(A, dtype=float)
        b = np.asarray(b, dtype=float)
        if A.ndim == 2:
            A = A[:, None, :]
        if b.ndim == 1:
            b = b[:, None]
        if A.ndim != 3 or b.shape != A.shape[:2]:
            raise ValidationError(f"incompatible quadratic data shapes A{A.shape} b{b.shape}")
        self.A, self.b = A, b
        self.num_samples, _, self.dim = A.shape
        self.hessian = np.einsum("smi,smj->ij", A, A) / self.num_samples
        self.linear = np.einsum("smi,sm->i", A, b) / self.num_samples
        self.const = 0.5 * float(np.mean(np.sum(b * b, axis=1)))
        self.optimum = np.linalg.lstsq(self.hessian, self.linear, rcond=None)[0]
        self.f_star = self.loss(self.optimum)

    def loss(self, x):
        return float(0.5 * x @ self.hessian @ x - self.linear @ x + self.const)

    def full_gradient(self, x):
        return self.hessian @ x - self.linear

    def sample_gradients(self, x, idx):
        a = self.A[idx]
        r = a @ x - self.b[idx]
        return np.einsum("smi,sm->si", a, r)

    def lipschitz(self) -> float:
        return float(np.linalg.eigvalsh(self.hessian)[-1])


def make_quadratic(
    N: int,
    condition: float = 10.0,
    num_samples: int = 100,
    noise: float = 0.0,
    seed: int = 0,
) -> QuadraticProblem:
    """Random least-squares quadratic whose average Hessian has eigenvalues
    ``geomspace(1, condition, N)`` exactly.

    ``noise`` perturbs each sample's matrix and target, which is the only
    source of per-sample gradient variance; ``noise=0`` makes all samples
    identical. The noiseless optimum is the all-ones vector.
    """
    if N < 1 or num_samples < 1:
        raise ValidationError("N and num_samples must be positive")
    if condition < 1:
        raise ValidationError(f"condition must be >= 1, got {condition}")
    if noise < 0:
        raise ValidationError("noise must be nonnegative")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((N, N)))
    q = q * np.sign(np.diag(r))
    eig = np.geomspace(1.0, condition, N)
    base = np.sqrt(eig)[:, None] * q.T
    A = np.broadcast_to(base, (num_samples, N, N)).copy()
    if noise > 0:
        A += noise * rng.standard_normal(A.shape) / math.sqrt(N)
    target = (q * eig) @ q.T
    h = np.einsum("smi,smj->ij", A, A) / num_samples
    A = A @ (_sym_sqrt(h, inverse=True) @ _sym_sqrt(target))
    x_true = np.ones(N)
    b = A @ x_true
    if noise > 0:
        b += noise * rng.standard_normal(b.shape)
    return QuadraticProblem(A, b)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class LogisticProblem(Problem):
    """L2-regularised logistic regression with labels in ``{-1, +1}``.

    The regulariser is folded into every per-sample loss so that sums of
    per-sample gradients stay unbiased.
    """

    kind = "logistic"

    def __init__(self, features, labels, l2: float = 0.0, solve: bool = True):
        X = np.atleast_2d(np.asarray(features, dtype=float))
        y = np.asarray(labels, dtype=float).ravel()
        if X.shape[0] == 0:
            raise ValidationError("logistic problem needs at least one sample")
        if X.shape[0] != y.size:
            raise ValidationError(f"{X.shape[0]} feature rows but {y.size} labels")
        if not np.all(np.isin(y, (-1.0, 1.0))):
            raise ValidationError("labels must be -1 or +1")
        if not np.all(np.isfinite(X)):
            raise ValidationError("features must be finite")
        if l2 < 0:
            raise ValidationError("l2 must be nonnegative")
        self.X, self.y, self.l2 = X, y, float(l2)
        self.num_samples, self.dim = X.shape
        if solve and self.l2 > 0:
            self.optimum = self._newton()
            self.f_star = self.loss(self.optimum)

    def loss(self, w):
        z = self.y * (self.X @ w)
        return float(np.mean(np.logaddexp(0.0, -z)) + 0.5 * self.l2 * w @ w)

    def full_gradient(self, w):
        z = self.y * (self.X @ w)
        return -(self.X.T @ (self.y * _sigmoid(-z))) / self.num_samples + self.l2 * w

    def sample_gradients(self, w, idx):
        X, y = self.X[idx], self.y[idx]
        s = _sigmoid(-y * (X @ w))
        return -(y * s)[:, None] * X + self.l2 * w

    def lipschitz(self) -> float:
        cov = self.X.T @ self.X / self.num_samples
        return float(0.25 * np.linalg.eigvalsh(cov)[-1] + self.l2)

    def _newton(self, iters: int = 50) -> np.ndarray:
        w = np.zeros(self.dim)
        for _ in range(iters):
            z = self.y * (self.X @ w)
            s = _sigmoid(z)
            hess = (self.X.T * (s * (1 - s))) @ self.X / self.num_samples + self.l2 * np.eye(self.dim)
            step = np.linalg.solve(hess, self.full_gradient(w))
            w = w - step
            if np.linalg.norm(step) < 1e-13:
                break
        return w


def make_logistic(features, labels, l2: float = 0.0) -> LogisticProblem:
    return LogisticProblem(features, labels, l2)


def synthetic_logistic_data(N: int, num_samples: int, seed: int = 0, flip: float = 0.1):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((num_samples, N))
    w = rng.standard_normal(N)
    y = np.where(X @ w >= 0, 1.0, -1.0)
    y[rng.random(num_samples) < flip] *= -1
    return X, y


class MLPProblem(Problem):
    """Scalar regression with one tanh hidden layer; squared-error loss.

    Parameter layout: ``W1 (h*d) | b1 (h) | w2 (h) | b2 (1)``.
    """

    kind = "small-mlp"
    MAX_PARAMS = 100

    def __init__(self, inputs, targets, hidden: int):
        X = np.atleast_2d(np.asarray(inputs, dtype=float))
        y = np.asarray(targets, dtype=float).ravel()
        if X.shape[0] != y.size or y.size == 0:
            raise ValidationError("mlp needs matching, nonempty inputs and targets")
        self.X, self.y, self.hidden = X, y, hidden
        self.num_samples, self.in_dim = X.shape
        self.dim = hidden * self.in_dim + 2 * hidden + 1
        if self.dim > self.MAX_PARAMS:
            raise ValidationError(f"mlp has {self.dim} parameters, limit is {self.MAX_PARAMS}")
        self._lip: float | None = None

    def _unpack(self, theta):
        h, d = self.hidden, self.in_dim
        W1 = theta[: h * d].reshape(h, d)
        b1 = theta[h * d : h * d + h]
        w2 = theta[h * d + h : h * d + 2 * h]
        return W1, b1, w2, theta[-1]

    def _forward(self, theta, X):
        W1, b1, w2, b2 = self._unpack(theta)
        a = np.tanh(X @ W1.T + b1)
        return a, a @ w2 + b2

    def loss(self, theta):
        _, pred = self._forward(theta, self.X)
        return float(0.5 * np.mean((pred - self.y) ** 2))

    def sample_gradients(self, theta, idx):
        X, y = self.X[idx], self.y[idx]
        _, _, w2, _ = self._unpack(theta)
        a, pred = self._forward(theta, X)
        r = pred - y
        delta = (r[:, None] * w2) * (1 - a * a)
        gW1 = delta[:, :, None] * X[:, None, :]
        return np.concatenate(
            [gW1.reshape(len(idx), -1), delta, r[:, None] * a, r[:, None]], axis=1
        )

    def lipschitz(self, points: int = 8, iters: int = 30, seed: int = 0) -> float:
        """Power-iteration estimate of the largest Hessian eigenvalue at random points.

        Heuristic: the true gradient Lipschitz constant is a supremum over all
        parameters; this only samples a handful of them.
        """
        if self._lip is not None:
            return self._lip
        rng = np.random.default_rng(seed)
        eps = 1e-5
        best = 0.0
        for _ in range(points):
            theta = rng.standard_normal(self.dim)
            g0 = self.full_gradient(theta)
            v = rng.standard_normal(self.dim)
            v /= np.linalg.norm(v)
            lam = 0.0
            for _ in range(iters):
                hv = (self.full_gradient(theta + eps * v) - g0) / eps
                lam = float(np.linalg.norm(hv))
                if lam == 0:
                    break
                v = hv / lam
            best = max(best, lam)
        self._lip = best
        return best


def make_mlp(in_dim: int = 3, hidden: int = 8, num_samples: int = 64, noise: float = 0.1, seed: int = 0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((num_samples, in_dim))
    teacher = MLPProblem(X, np.zeros(num_samples), hidden)
    theta = rng.standard_normal(teacher.dim)
    _, y = teacher._forward(theta, X)
    return MLPProblem(X, y + noise * rng.standard_normal(num_samples), hidden)


@dataclass(frozen=True)
class DataPartition:
    shards: tuple[np.ndarray, ...]
    strategy: str
    weights: np.ndarray

    @property
    def n(self) -> int:
        return len(self.shards)


def largest_remainder(total: int, p: np.ndarray) -> np.ndarray:
    quota = total * np.asarray(p, dtype=float)
    sizes = np.floor(quota).astype(int)
    short = total - int(sizes.sum())
    order = sorted(range(len(p)), key=lambda i: (-(quota[i] - sizes[i]), i))
    for i in order[:short]:
        sizes[i] += 1
    return sizes


def partition_data(problem: Problem, p: Sequence[float], strategy: str = SHARED, seed: int = 0) -> DataPartition:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
        raise ValidationError("partition weights must form a probability vector")
    S = problem.num_samples
    if strategy == SHARED:
        full = np.arange(S)
        return DataPartition(tuple(full for _ in p), SHARED, p)
    if strategy != SPLIT:
        raise ValidationError(f"unknown partition strategy {strategy!r}")
    sizes = largest_remainder(S, p)
    starved = [i for i in range(len(p)) if p[i] > 0 and sizes[i] == 0]
    if starved:
        raise InsufficientDataError(f"{S} samples leave workers {starved} with empty shards")
    perm = np.random.default_rng(seed).permutation(S)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    shards = tuple(np.sort(perm[bounds[i] : bounds[i + 1]]) for i in range(len(p)))
    return DataPartition(shards, SPLIT, p)


def sample_gradient(
    problem: Problem,
    partition: DataPartition,
    worker: int,
    model: np.ndarray,
    M: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Sum of ``M`` per-sample gradients drawn with replacement from the worker's shard."""
    shard = partition.shards[worker]
    if len(shard) == 0:
        raise InsufficientDataError(f"worker {worker} has an empty shard")
    if M < 1:
        raise ValidationError("batch size must be at least 1")
    idx = shard[rng.integers(len(shard), size=M)]
    return problem.batch_gradient(model, idx)


@dataclass(frozen=True)
class VarianceEstimate:
    sigma_sq: float
    varsigma_sq: float
    sample_points: int


def estimate_variances(
    problem: Problem,
    partition: DataPartition,
    probe_models: Sequence[np.ndarray],
    draws: int,
    rng: np.random.Generator,
) -> VarianceEstimate:
    """Empirical maxima of the within-worker and across-worker gradient variances.

    Within-worker variance is taken as the max over workers, as the bound must
    hold for every worker. Shards no larger than ``draws`` are enumerated
    exactly; larger ones are subsampled.
    """
    if draws < 100:
        raise ValidationError("need at least 100 draws per probe")
    p = partition.weights
    sigma = varsigma = 0.0
    used = 0
    for x in probe_models:
        x = np.asarray(x, dtype=float)
        means = []
        for i, shard in enumerate(partition.shards):
            if len(shard) == 0:
                means.append(np.zeros(problem.dim))
                continue
            gi = problem.shard_gradient(x, shard)
            means.append(gi)
            if p[i] == 0:
                continue
            pts = shard if len(shard) <= draws else shard[rng.integers(len(shard), size=draws)]
            dev = problem.sample_gradients(x, pts) - gi
            sigma = max(sigma, float(np.mean(np.sum(dev * dev, axis=1))))
            used += len(pts)
        means = np.array(means)
        fbar = p @ means
        varsigma = max(varsigma, float(p @ np.sum((means - fbar) ** 2, axis=1)))
    return VarianceEstimate(sigma, varsigma, used)


def estimate_lipschitz(problem: Problem) -> float:
    return problem.lipschitz()


def load_csv_dataset(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """One sample per row, label in the last column; a header row is skipped."""
    path = Path(path)
    try:
        data = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError:
        data = np.loadtxt(path, delimiter=",", ndmin=2, skiprows=1)
    if data.shape[1] < 2:
        raise ValidationError(f"{path}: need at least one feature column and a label column")
    return data[:, :-1], data[:, -1]
