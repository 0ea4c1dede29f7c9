"""Named experiment scenarios and their report tables."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import theory
from . import topology as tp
from .config import RunConfig, SlowdownSpec, SpeedSpec, StalenessSpec, resolve
from .errors import ValidationError
from .experiment import ExperimentResult, dump_json, run_experiment, speedup_table, table_csv, write_atomic

# Shared noisy quadratic used by the rate and speedup scenarios.
_QUAD20 = {"problem.kind": "quadratic", "problem.dim": 20, "problem.condition": 10.0,
           "problem.num_samples": 200, "problem.noise": 1.0}
_QUAD10 = {**_QUAD20, "problem.dim": 10}

STRAGGLER_FACTORS = (1.0, 2.0, 10.0, 100.0)
CONSENSUS_KS = (1, 5, 10, 25, 50)
STALENESS_TAUS = (0, 1, 4, 8)


@dataclass
class Preset:
    name: str
    description: str
    configs: list[RunConfig] = field(default_factory=list)
    kind: str = "runs"
    params: dict = field(default_factory=dict)


def _consistency(quick: bool) -> Preset:
    K = 1_000 if quick else 10_000
    base = RunConfig(name="adpsgd-n1", algorithm="adpsgd", gamma=0.01, iterations=K, seeds=[0], record_every=1)
    base = base.replace(**{"topology.n": 1, **_QUAD10})
    return Preset(
        "consistency-sgd",
        "AD-PSGD on one worker with zero staleness against serial SGD, same seed",
        [base, base.replace(name="sgd-n1", algorithm="sgd")],
    )


def _convergence(quick: bool) -> Preset:
    K = 500 if quick else 5_000
    seeds = [0, 1] if quick else list(range(10))
    base = RunConfig(gamma="corollary", iterations=K, seeds=seeds, record_every=max(1, K // 20))
    base = base.replace(**{"topology.kind": "ring", "topology.n": 8, **_QUAD20})
    return Preset(
        "convergence-rate",
        "n=8 ring, corollary step size for budgets K and 4K",
        [base.replace(name=f"rate-K{k}", iterations=k) for k in (K, 4 * K)],
    )


def _speedup(quick: bool) -> Preset:
    seeds = [0, 1] if quick else list(range(10))
    base = RunConfig(
        mode="simulate",
        gamma="corollary",
        iterations=20_000,
        seeds=seeds,
        record_every=50,
        target_gap=0.05 if quick else 0.01,
        stop_at_target=True,
        speed=SpeedSpec(compute_time=1.0, link_time=0.01),
    )
    base = base.replace(**{"topology.kind": "ring", **_QUAD10})
    return Preset(
        "linear-speedup",
        "compute-bound simulation, corollary step size for a fixed budget, n in {1,2,4,8}",
        [base.replace(name=f"speedup-n{n}", **{"topology.n": n}) for n in (1, 2, 4, 8)],
    )


def _straggler(quick: bool, factors=STRAGGLER_FACTORS, name="straggler") -> Preset:
    seeds = [0] if quick else [0, 1, 2]
    horizon = 250.0 if quick else 1000.0
    base = RunConfig(
        mode="simulate",
        gamma=0.01,
        horizon=horizon,
        seeds=seeds,
        record_every=500,
        speed=SpeedSpec(compute_time=1.0, link_time=0.01, allreduce_alpha=0.001, allreduce_beta=0.0001),
    )
    base = base.replace(**{"topology.kind": "ring", "topology.n": 16, **_QUAD10})
    configs = []
    for f in factors:
        slow = [SlowdownSpec("worker", 0, f)] if f > 1 else []
        for algo, mode in (("adpsgd", "simulate"), ("allreduce", "synchronous"), ("dpsgd", "synchronous")):
            cfg = replace(base, name=f"straggler-{algo}-x{f:g}", algorithm=algo, mode=mode,
                          speed=replace(base.speed, slowdown=slow))
            configs.append(cfg.replace())
    label = ", ".join(f"{f:g}x" for f in factors)
    return Preset(name, f"n=16 ring with worker 0 slowed {label}", configs, params={"factors": list(factors)})


def _staleness(quick: bool) -> Preset:
    seeds = [0, 1] if quick else list(range(10))
    base = RunConfig(gamma="corollary", iterations=1, seeds=seeds, record_every=1000,
                     staleness=StalenessSpec("fixed", 8, 8))
    base = base.replace(**{"topology.kind": "ring", "topology.n": 2, "problem.dim": 5,
                           "problem.condition": 2.0, "problem.num_samples": 200, "problem.noise": 3.0})
    K = 1_000 if quick else math.ceil(theory.min_iterations(resolve(base).theory_inputs()))
    return Preset(
        "staleness-bound",
        "fixed staleness tau in {0,1,4,8} under cap 8, budget at the corollary minimum",
        [base.replace(name=f"staleness-tau{t}", iterations=K, **{"staleness.tau": t}) for t in STALENESS_TAUS],
    )


def _consensus(quick: bool) -> Preset:
    return Preset(
        "consensus-decay",
        "Monte-Carlo consensus distance of products of pair averages on a 5-ring",
        kind="consensus-decay",
        params={"topology": "ring", "n": 5, "ks": list(CONSENSUS_KS), "trials": 1_000 if quick else 10_000, "seed": 0},
    )


def _theory_grid(quick: bool) -> Preset:
    return Preset(
        "theory-grid",
        "corollary step size at K_min across workers, batch sizes, staleness and topologies",
        kind="theory-grid",
        params={
            "n": [1, 2, 4, 8] if quick else [1, 2, 3, 4, 5, 6, 8, 12, 16],
            "M": [1, 8],
            "T": [0, 8] if quick else [0, 1, 2, 4, 8],
            "topology": ["ring", "skip-ring"],
            "L": [1.0, 10.0],
            "sigma_sq": [0.1, 10.0],
            "varsigma_sq": [0.0, 1.0],
        },
    )


_PRESETS = {
    "consistency-sgd": _consistency,
    "convergence-rate": _convergence,
    "linear-speedup": _speedup,
    "straggler": _straggler,
    "straggler-10x": lambda quick: _straggler(quick, (1.0, 10.0), "straggler-10x"),
    "staleness-bound": _staleness,
    "consensus-decay": _consensus,
    "theory-grid": _theory_grid,
}


def names() -> list[str]:
    return list(_PRESETS)


def preset(name: str, quick: bool = False) -> Preset:
    """Build a named scenario. ``quick`` shrinks budgets and seed counts."""
    try:
        return _PRESETS[name](quick)
    except KeyError:
        raise ValidationError(f"unknown preset {name!r}; available: {', '.join(_PRESETS)}") from None


def emit(p: Preset, out_dir: str | Path) -> list[Path]:
    """Write each config as TOML plus a JSON description of the preset."""
    out = Path(out_dir)
    paths = []
    for cfg in p.configs:
        path = out / f"{cfg.name}.toml"
        write_atomic(path, cfg.dumps())
        paths.append(path)
    meta = {"name": p.name, "description": p.description, "kind": p.kind, "params": p.params,
            "configs": [c.name for c in p.configs]}
    write_atomic(out / "preset.json", dump_json(meta))
    return paths + [out / "preset.json"]


# ---- report tables ---------------------------------------------------------


def consensus_table(params: dict) -> list[dict]:
    graph = tp.build_ring(params["n"]) if params["topology"] == "ring" else tp.build_complete(params["n"])
    rho = tp.spectral_gap(tp.expected_gram(graph))
    n = graph.n
    rows = []
    for i in range(n):
        rng = np.random.default_rng([params["seed"], i])
        est = tp.consensus_decay(graph, params["ks"], params["trials"], rng, worker=i)
        for K, (mean, se) in sorted(est.items()):
            rows.append({"worker": i, "K": K, "mean": mean, "se": se, "bound": (n - 1) / n * rho**K})
    return rows


def theory_grid_rows(params: dict) -> list[dict]:
    rows = []
    rho_cache: dict[tuple[str, int], float] = {}
    for topo, n, M, T, L, s2, vs2 in itertools.product(
        params["topology"], params["n"], params["M"], params["T"], params["L"], params["sigma_sq"],
        params["varsigma_sq"],
    ):
        if (topo, n) not in rho_cache:
            g = tp.build_ring(n) if topo == "ring" else tp.build_skip_ring(n)
            rho_cache[(topo, n)] = tp.spectral_gap(tp.expected_gram(g))
        rho = rho_cache[(topo, n)]
        probe = theory.TheoryInputs(n, M, L, T, rho, s2, vs2, gamma=1.0, K=1)
        K = max(1, math.ceil(theory.min_iterations(probe)))
        gamma = theory.corollary_gamma(n, M, L, s2, vs2, K)
        inp = replace(probe, gamma=gamma, K=K)
        c1, c2, c3 = theory.constants(inp)
        rows.append({"topology": topo, "n": n, "M": M, "T": T, "L": L, "sigma_sq": s2, "varsigma_sq": vs2,
                     "rho": rho, "K": K, "gamma": gamma, "C1": c1, "C2": c2, "C3": c3,
                     "valid": theory.constants_valid(c1, c2, c3)})
    return rows


def _loss_column(r: ExperimentResult) -> list[str]:
    return [repr(float(v)) for v in r.series[0].column("loss_avg_model")]


def _report(p: Preset, results: list[ExperimentResult]) -> tuple[dict, list[dict] | None]:
    if p.name == "consistency-sgd":
        a, b = results
        return {"identical_loss_trajectories": _loss_column(a) == _loss_column(b)}, None
    if p.name == "convergence-rate":
        rows = []
        for r in results:
            s = r.setup
            inp = s.theory_inputs()
            f0 = s.problem.loss(s.x0) - s.problem.f_star_bound
            rows.append({"K": s.config.iterations, "gamma": s.gamma,
                         "avg_grad_norm_sq": r.summary["avg_grad_norm_sq"]["mean"],
                         "bound": theory.theorem_bound(inp, f0, strict=False),
                         "constants_valid": theory.check(inp).valid})
        return {"decrease_factor": rows[0]["avg_grad_norm_sq"] / rows[1]["avg_grad_norm_sq"]}, rows
    if p.name == "linear-speedup":
        return {}, speedup_table(results)
    if p.name.startswith("straggler"):
        base = {r.config.algorithm: r.summary["epoch_time"]["mean"] for r in results if not r.config.speed.slowdown}
        rows = []
        for r in results:
            f = r.config.speed.slowdown[0].factor if r.config.speed.slowdown else 1.0
            t = r.summary["epoch_time"]["mean"]
            rows.append({"factor": f, "algorithm": r.config.algorithm, "epoch_time": t,
                         "increase": t / base[r.config.algorithm]})
        return {}, rows
    if p.name == "staleness-bound":
        rows = [{"tau": r.config.staleness.tau, "K": r.config.iterations, "gamma": r.setup.gamma,
                 "avg_grad_norm_sq": r.summary["avg_grad_norm_sq"]["mean"],
                 "final_grad_norm_sq": float(np.mean([x.summary["final_grad_norm_sq"] for x in r.series])),
                 "max_staleness": max(x.summary["max_staleness"] for x in r.series),
                 "cap": r.setup.staleness_cap} for r in results]
        return {}, rows
    return {}, None


def run_preset(p: Preset, out_dir: str | Path, write: bool = True) -> dict:
    """Execute a preset, writing per-run artifacts and a report table under ``out_dir``."""
    out = Path(out_dir)
    results: list[ExperimentResult] = []
    if p.kind == "consensus-decay":
        report, rows = {}, consensus_table(p.params)
    elif p.kind == "theory-grid":
        rows = theory_grid_rows(p.params)
        report = {"configurations": len(rows), "invalid": sum(not r["valid"] for r in rows)}
    else:
        results = [run_experiment(c, out, write) for c in p.configs]
        report, rows = _report(p, results)
    report = {"preset": p.name, **report}
    if rows is not None:
        report["table"] = rows
    if write:
        if rows:
            write_atomic(out / f"{p.name}.csv", table_csv(rows))
        write_atomic(out / f"{p.name}-report.json", dump_json(report))
    report["results"] = results
    return report
