"""Per-iteration metrics, CSV export and cross-seed aggregation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

BASE_COLUMNS = (
    "k",
    "simulated_time",
    "loss_avg_model",
    "grad_norm_sq_avg_model",
    "consensus_Mk",
    "max_staleness",
)


def csv_columns(n: int) -> list[str]:
    return list(BASE_COLUMNS) + [f"worker_updates_{i}" for i in range(n)]


def consensus_Mk(models: np.ndarray, p: Sequence[float] | None = None) -> float:
    """``sum_i p_i ||X 1/n - x^i||^2`` for a model matrix with one column per worker."""
    X = np.asarray(models, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    n = X.shape[1]
    p = np.full(n, 1.0 / n) if p is None else np.asarray(p, dtype=float)
    dev = X - X.mean(axis=1, keepdims=True)
    return float(p @ np.sum(dev * dev, axis=0))


@dataclass
class MetricsRecord:
    k: int
    simulated_time: float
    loss_avg: float
    grad_norm_sq_avg: float
    consensus_Mk: float
    max_staleness: int
    worker_updates: tuple[int, ...]

    def row(self) -> list[str]:
        vals = [
            str(self.k),
            repr(float(self.simulated_time)),
            repr(float(self.loss_avg)),
            repr(float(self.grad_norm_sq_avg)),
            repr(float(self.consensus_Mk)),
            str(self.max_staleness),
        ]
        return vals + [str(u) for u in self.worker_updates]


@dataclass
class MetricsSeries:
    n: int
    records: list[MetricsRecord] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def append(self, rec: MetricsRecord) -> None:
        if self.records and rec.k < self.records[-1].k:
            raise ValueError(f"record k={rec.k} precedes k={self.records[-1].k}")
        self.records.append(rec)

    def column(self, name: str) -> np.ndarray:
        attr = {"loss_avg_model": "loss_avg", "grad_norm_sq_avg_model": "grad_norm_sq_avg"}.get(name, name)
        return np.array([getattr(r, attr) for r in self.records], dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(csv_columns(self.n))
        for r in self.records:
            w.writerow(r.row())
        return buf.getvalue()


def read_csv(text: str) -> list[dict[str, float]]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [{k: float(v) for k, v in r.items()} for r in rows]


def first_crossing(times: Iterable[float], values: Iterable[float], target: float) -> float | None:
    for t, v in zip(times, values):
        if v <= target:
            return float(t)
    return None


def aggregate(series: Sequence[MetricsSeries]) -> dict:
    """Mean and standard deviation of each metric at every k recorded by all seeds."""
    if not series:
        return {}
    common = set(r.k for r in series[0].records)
    for s in series[1:]:
        common &= set(r.k for r in s.records)
    ks = sorted(common)
    out = {"k": ks}
    for name, attr in (
        ("simulated_time", "simulated_time"),
        ("loss_avg_model", "loss_avg"),
        ("grad_norm_sq_avg_model", "grad_norm_sq_avg"),
        ("consensus_Mk", "consensus_Mk"),
    ):
        table = np.array([[getattr(r, attr) for r in s.records if r.k in common] for s in series])
        out[name] = {"mean": _finite_list(table.mean(axis=0)), "std": _finite_list(table.std(axis=0))}
    return out


def summarize_values(values: Sequence[float | None]) -> dict:
    vals = [v for v in values if v is not None and math.isfinite(v)]
    if not vals:
        return {"mean": None, "std": None, "count": 0}
    arr = np.array(vals)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "count": len(vals)}


def _finite_list(a: np.ndarray) -> list:
    return [float(v) if math.isfinite(v) else None for v in a]
