"""Multi-seed experiment runner, sweeps and result aggregation."""

from __future__ import annotations

import itertools
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .algorithms import run_logical
from .config import RunConfig, Setup, parse_value, resolve
from .errors import DeadlockError, DivergenceError, ValidationError
from .metrics import MetricsSeries
from .simulator import EventTrace, simulate, simulate_synchronous

OUTPUT_ENV = "ADPSGD_OUTPUT_DIR"


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "results"))


def write_atomic(path: Path, text: str) -> None:
    """Write ``text`` to a temporary sibling, then rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def jsonable(obj):
    """Replace non-finite floats with None and numpy scalars with builtins."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def dump_json(obj) -> str:
    return json.dumps(jsonable(obj), indent=2, sort_keys=True) + "\n"


def run_once(setup: Setup, seed: int) -> tuple[MetricsSeries, EventTrace | None]:
    """Dispatch one seed to the logical, event-driven or synchronous engine."""
    mode = setup.config.mode
    if mode == "logical":
        return run_logical(setup, seed), None
    if mode == "simulate":
        return simulate(setup, seed)
    return simulate_synchronous(setup, seed=seed)


def time_to_target(series: MetricsSeries, target: float | None) -> float | None:
    """First recorded time (or k for logical runs) at which the loss reaches ``target``."""
    if target is None:
        return None
    times = series.column("simulated_time")
    if np.all(np.isnan(times)):
        times = series.column("k")
    return metrics.first_crossing(times, series.column("loss_avg_model"), target)


@dataclass
class ExperimentResult:
    config: RunConfig
    setup: Setup
    series: list[MetricsSeries]
    traces: list[EventTrace | None]
    summary: dict
    out_dir: Path | None = None

    @property
    def runs(self) -> list[dict]:
        return [s.summary for s in self.series]


def summarize(setup: Setup, series: list[MetricsSeries]) -> dict:
    cfg = setup.config
    target = setup.target()
    ttt = [time_to_target(s, target) for s in series]
    out = {
        "name": cfg.name,
        "algorithm": cfg.algorithm,
        "mode": cfg.mode,
        "n": setup.n,
        "gamma": setup.gamma,
        "batch_size": setup.M,
        "seeds": list(cfg.seeds),
        "target_loss": target,
        "time_to_target": metrics.summarize_values(ttt),
        "time_to_target_per_seed": ttt,
        "final_loss": metrics.summarize_values([s.summary["final_loss"] for s in series]),
        "avg_grad_norm_sq": metrics.summarize_values([s.summary["avg_grad_norm_sq"] for s in series]),
        "aggregate": metrics.aggregate(series),
        "runs": [s.summary for s in series],
    }
    if cfg.mode != "logical":
        out["epoch_time"] = metrics.summarize_values([s.summary["epoch_time"] for s in series])
    return out


def run_experiment(config: RunConfig, out_dir: str | Path | None = None, write: bool = True) -> ExperimentResult:
    """Run every seed of ``config``; optionally write CSVs, traces, summary and plots.

    Divergence and deadlock errors are re-raised with the run name and seed
    prepended to the message.
    """
    setup = resolve(config)
    series, traces = [], []
    for seed in config.seeds:
        try:
            s, tr = run_once(setup, seed)
        except (DivergenceError, DeadlockError) as exc:
            exc.args = (f"run {config.name!r}, seed {seed}: {exc}",)
            raise
        series.append(s)
        traces.append(tr)
    summary = summarize(setup, series)
    result = ExperimentResult(config, setup, series, traces, summary)
    if write:
        base = Path(out_dir) if out_dir is not None else Path(config.output.dir or default_output_dir())
        result.out_dir = base / config.name
        write_result(result)
    return result


def write_result(result: ExperimentResult) -> None:
    d = result.out_dir
    for seed, s, tr in zip(result.config.seeds, result.series, result.traces):
        write_atomic(d / f"metrics_seed{seed}.csv", s.to_csv())
        if tr is not None and result.config.output.trace:
            write_atomic(d / f"trace_seed{seed}.jsonl", tr.to_jsonl())
    write_atomic(d / "config.toml", result.config.dumps())
    write_atomic(d / "summary.json", dump_json(result.summary))
    if result.config.output.plot:
        plot_losses(result, d / "loss.png")


def plot_losses(result: ExperimentResult, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    timed = result.config.mode != "logical"
    for seed, s in zip(result.config.seeds, result.series):
        x = s.column("simulated_time") if timed else s.column("k")
        ax.plot(x, s.column("loss_avg_model"), lw=1, label=f"seed {seed}")
    ax.set_xlabel("simulated time" if timed else "iteration k")
    ax.set_ylabel("loss at average model")
    ax.set_yscale("log")
    ax.legend(fontsize="small")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp.png")
    fig.savefig(tmp, dpi=120)
    plt.close(fig)
    os.replace(tmp, path)


def parse_vary(spec: str) -> tuple[str, list]:
    """``key=v1,v2,...`` into a dotted key and a list of typed values."""
    if "=" not in spec:
        raise ValidationError(f"--vary expects key=v1,v2,..., got {spec!r}")
    key, _, values = spec.partition("=")
    items = [parse_value(v.strip()) for v in values.split(",") if v.strip()]
    if not key.strip() or not items:
        raise ValidationError(f"--vary expects key=v1,v2,..., got {spec!r}")
    return key.strip(), items


def sweep_configs(config: RunConfig, vary: dict[str, list]) -> list[RunConfig]:
    keys = list(vary)
    out = []
    for combo in itertools.product(*(vary[k] for k in keys)):
        changes = dict(zip(keys, combo))
        label = "-".join(f"{k.split('.')[-1]}={v}" for k, v in changes.items())
        out.append(config.replace(name=f"{config.name}-{label}", **changes))
    return out


def speedup_table(results: list[ExperimentResult]) -> list[dict]:
    """Mean time-to-target by worker count, normalised by the single-worker run.

    Rows carry ``speedup = T(1) / T(n)`` and ``ratio_to_ideal = T(n) / (T(1)/n)``.
    """
    by_n: dict[int, list[float | None]] = {}
    for r in results:
        by_n.setdefault(r.setup.n, []).extend(r.summary["time_to_target_per_seed"])
    means = {n: metrics.summarize_values(v)["mean"] for n, v in sorted(by_n.items())}
    base = means.get(1)
    rows = []
    for n, t in means.items():
        ok = base is not None and t is not None and t > 0
        rows.append(
            {
                "n": n,
                "time_to_target": t,
                "speedup": base / t if ok else None,
                "ratio_to_ideal": t / (base / n) if ok else None,
            }
        )
    return rows


def table_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join("" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else str(r[c])) for c in cols))
    return "\n".join(lines) + "\n"


def run_sweep(config: RunConfig, vary: dict[str, list], out_dir: str | Path | None = None, write: bool = True):
    """Run the cartesian product of ``vary``; adds a speedup table when the worker count varies."""
    results = [run_experiment(c, out_dir, write) for c in sweep_configs(config, vary)]
    sweep = {"name": config.name, "vary": vary, "runs": [r.summary["name"] for r in results]}
    if "topology.n" in vary:
        sweep["speedup"] = speedup_table(results)
    if write:
        base = Path(out_dir) if out_dir is not None else Path(config.output.dir or default_output_dir())
        write_atomic(base / f"{config.name}-sweep.json", dump_json(sweep))
        if "speedup" in sweep:
            write_atomic(base / f"{config.name}-speedup.csv", table_csv(sweep["speedup"]))
    return results, sweep
