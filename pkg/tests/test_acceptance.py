"""End-to-end acceptance checks at full scale.

Each test records one PASS/FAIL line, printed again in the terminal summary.
Preset runs are cached per module so the determinism check can compare a
fresh rerun against the first execution.
"""

import itertools
import math
import time
from pathlib import Path

import numpy as np
import pytest

from adpsgd import presets, simulator as sim, theory
from adpsgd import topology as tp
from adpsgd.config import RunConfig

nx = pytest.importorskip("networkx")


@pytest.fixture(scope="module")
def preset_runs(tmp_path_factory):
    cache: dict[str, tuple[dict, float, Path]] = {}
    root = tmp_path_factory.mktemp("acceptance")

    def get(name: str, tag: str = "first"):
        key = f"{tag}:{name}"
        if key not in cache:
            out = root / tag / name
            t0 = time.perf_counter()
            report = presets.run_preset(presets.preset(name), out)
            cache[key] = (report, time.perf_counter() - t0, out)
        return cache[key]

    return get


def test_criterion_1_sgd_consistency(preset_runs, acceptance_line):
    report, elapsed, _ = preset_runs("consistency-sgd")
    a, b = report["results"]
    steps = a.config.iterations
    ok = report["identical_loss_trajectories"] and steps == 10_000 and elapsed < 5.0
    acceptance_line("1 SGD consistency", ok,
                    f"identical={report['identical_loss_trajectories']} over {steps} steps in {elapsed:.2f}s")
    assert report["identical_loss_trajectories"]
    assert a.series[0].to_csv() == b.series[0].to_csv()
    assert steps == 10_000
    assert elapsed < 5.0


def test_criterion_2_doubly_stochastic_mean_preservation(acceptance_line):
    t0 = time.perf_counter()
    graphs = [tp.build_ring(8), tp.build_ring(16), tp.build_skip_ring(9), tp.build_complete(6),
              tp.build_complete_bipartite(3, 4)]
    per_graph, chunk = 200_000, 20_000
    rng = np.random.default_rng(2024)
    worst_stoch = worst_mean = 0.0
    total = 0
    for g in graphs:
        n = g.n
        sampler = tp.PairSampler(g)
        X = rng.standard_normal((5, n))
        target = X.mean(axis=1)
        for _ in range(per_graph // chunk):
            i, j = sampler.sample_many(rng, chunk)
            W = tp.averaging_matrices(i, j, n)
            worst_stoch = max(worst_stoch, np.abs(W.sum(axis=1) - 1).max(), np.abs(W.sum(axis=2) - 1).max(),
                              np.abs(W - np.transpose(W, (0, 2, 1))).max())
            assert W.min() >= 0
            Y = np.einsum("dn,knm->kdm", X, W)
            worst_mean = max(worst_mean, np.abs(Y.mean(axis=2) - target).max())
            total += chunk
    elapsed = time.perf_counter() - t0
    ok = worst_stoch <= 1e-12 and worst_mean <= 1e-12 and total >= 10**6 and elapsed < 60
    acceptance_line("2 doubly stochastic + mean preservation", ok,
                    f"{total} events, stochasticity err {worst_stoch:.1e}, mean drift {worst_mean:.1e}, "
                    f"{elapsed:.1f}s")
    assert total >= 10**6
    assert worst_stoch <= 1e-12
    assert worst_mean <= 1e-12
    assert elapsed < 60


def test_criterion_3_consensus_decay(preset_runs, acceptance_line):
    report, elapsed, _ = preset_runs("consensus-decay")
    rows = report["table"]
    p = presets.preset("consensus-decay").params
    slack = [r["bound"] + 3 * r["se"] - r["mean"] for r in rows]
    ok = min(slack) >= 0 and p["trials"] == 10_000 and elapsed < 60
    acceptance_line("3 consensus decay", ok,
                    f"{len(rows)} (worker, K) cells, min slack {min(slack):.3e}, {elapsed:.1f}s")
    assert {r["K"] for r in rows} == {1, 5, 10, 25, 50}
    assert p["trials"] == 10_000 and p["n"] == 5
    for r in rows:
        assert r["mean"] <= r["bound"] + 3 * r["se"], r
    assert elapsed < 60


def test_criterion_4_convergence_rate(preset_runs, acceptance_line):
    report, elapsed, _ = preset_runs("convergence-rate")
    rows = report["table"]
    factor = report["decrease_factor"]
    under = all(r["avg_grad_norm_sq"] <= r["bound"] for r in rows)
    ok = factor >= 1.6 and under and elapsed < 300
    detail = ", ".join(f"K={r['K']}: {r['avg_grad_norm_sq']:.4g} <= {r['bound']:.4g}" for r in rows)
    acceptance_line("4 convergence rate", ok, f"decrease x{factor:.2f}; {detail}; {elapsed:.1f}s")
    assert rows[1]["K"] == 4 * rows[0]["K"]
    assert len(report["results"][0].config.seeds) == 10
    assert factor >= 1.6
    assert under
    assert elapsed < 300


def test_criterion_5_linear_speedup(preset_runs, acceptance_line):
    report, elapsed, _ = preset_runs("linear-speedup")
    rows = {r["n"]: r for r in report["table"]}
    ratios = {n: rows[n]["ratio_to_ideal"] for n in (2, 4, 8)}
    ok = all(r is not None and 0.75 <= r <= 1.25 for r in ratios.values()) and elapsed < 600
    acceptance_line("5 linear speedup", ok,
                    ", ".join(f"n={n}: {r:.3f} of ideal" for n, r in ratios.items()) + f"; {elapsed:.1f}s")
    for res in report["results"]:
        assert len(res.config.seeds) == 10
        assert res.config.speed.link_time <= 0.01 * res.config.speed.compute_time
        assert all(t is not None for t in res.summary["time_to_target_per_seed"])
    for r in ratios.values():
        assert 0.75 <= r <= 1.25
    assert elapsed < 600


def test_criterion_6_straggler(preset_runs, acceptance_line):
    report, elapsed, _ = preset_runs("straggler")
    inc = {(r["algorithm"], r["factor"]): r["increase"] for r in report["table"]}
    checks = [
        inc[("adpsgd", 10.0)] <= 1.15,
        inc[("adpsgd", 100.0)] <= 1.15,
        inc[("allreduce", 10.0)] >= 5 and inc[("dpsgd", 10.0)] >= 5,
        inc[("allreduce", 100.0)] >= 50 and inc[("dpsgd", 100.0)] >= 50,
    ]
    ok = all(checks) and elapsed < 300
    detail = ", ".join(f"{a}@{f:g}x {inc[(a, f)]:.3f}" for a, f in sorted(inc) if f in (10.0, 100.0))
    acceptance_line("6 straggler robustness", ok, f"{detail}; {elapsed:.1f}s")
    assert all(checks), inc
    assert elapsed < 300


def test_criterion_7_staleness(preset_runs, acceptance_line):
    report, elapsed, _ = preset_runs("staleness-bound")
    rows = report["table"]
    vals = [r["avg_grad_norm_sq"] for r in rows]
    spread = max(vals) / min(vals)
    res0 = report["results"][0]
    k_min = theory.min_iterations(res0.setup.theory_inputs())
    capped = all(r["max_staleness"] <= r["cap"] for r in rows)
    ok = spread <= 2 and capped and all(r["K"] >= k_min for r in rows) and elapsed < 300
    acceptance_line("7 staleness bound", ok,
                    f"avg grad spread x{spread:.3f} over tau {[r['tau'] for r in rows]}, "
                    f"max tau {[r['max_staleness'] for r in rows]} (cap {rows[0]['cap']}), K={rows[0]['K']} "
                    f">= K_min {k_min:.0f}; {elapsed:.1f}s")
    assert [r["tau"] for r in rows] == [0, 1, 4, 8]
    assert all(r["K"] >= k_min for r in rows)
    assert capped
    assert [r["max_staleness"] for r in rows] == [0, 1, 4, 8]
    assert spread <= 2
    assert elapsed < 300


def test_criterion_8_theory_self_consistency(preset_runs, acceptance_line):
    report, elapsed, _ = preset_runs("theory-grid")
    rows = report["table"]
    bad = [r for r in rows if not (r["C1"] > 0 and r["C2"] >= 0 and r["C3"] <= 1)]
    spot_inputs = theory.TheoryInputs(1, 1, 1.0, 0, 0.0, 1.0, 0.0, 0.05, 100)
    _, c2, c3 = theory.constants(spot_inputs)
    g = theory.corollary_gamma(1, 1, 1.0, 1.0, 0.0, 100)
    bound = theory.theorem_bound(theory.TheoryInputs(1, 1, 1.0, 0, 0.0, 1.0, 0.0, g, 100), 0.5)
    spots = [abs(c2 - 0.0225), abs(c3 - 0.5), abs(g - 0.05), abs(bound - 0.3), abs(theory.bar_rho(0.25, 2) - 8 / 3)]
    ok = not bad and max(spots) <= 1e-12 and elapsed < 10
    acceptance_line("8 theory self-consistency", ok,
                    f"{len(rows)} grid points, {len(bad)} violations, max spot error {max(spots):.1e}, "
                    f"{elapsed:.2f}s")
    assert max(r["n"] for r in rows) == 16 and {r["M"] for r in rows} == {1, 8} and max(r["T"] for r in rows) == 8
    assert not bad
    assert max(spots) <= 1e-12
    assert elapsed < 10


def _bipartite_bruteforce(n: int, edges: np.ndarray, colorings: np.ndarray) -> bool:
    if edges.size == 0:
        return True
    return bool(np.any(np.all(colorings[:, edges[:, 0]] != colorings[:, edges[:, 1]], axis=1)))


def test_criterion_9_deadlock_freedom_and_progress(acceptance_line):
    t0 = time.perf_counter()
    cfg = RunConfig(mode="simulate", horizon=1000.0, gamma=0.01, record_every=1000).replace(
        **{"topology.kind": "ring", "topology.n": 16, "problem.dim": 10, "problem.num_samples": 200,
           "problem.noise": 1.0, "speed.link_time": 0.01})
    series, _ = sim.simulate(cfg)
    updates = series.summary["worker_updates"]
    progress = min(updates) / max(updates)

    colorings = {n: np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.int8) for n in range(1, 9)}
    checked = mismatches = 0

    def check(n, edge_list):
        nonlocal checked, mismatches
        e = np.array(edge_list, dtype=int).reshape(-1, 2)
        verdict = sim.detect_deadlock_freedom(tp.TopologyGraph(n, frozenset(tuple(sorted(p)) for p in edge_list)))
        checked += 1
        if verdict.deadlock_free != _bipartite_bruteforce(n, e, colorings[n]):
            mismatches += 1

    atlas = [g for g in nx.graph_atlas_g() if g.number_of_nodes() >= 1]
    for g in atlas:
        check(g.number_of_nodes(), list(g.edges()))
    # Every 8-vertex graph is a 7-vertex graph plus one vertex joined to some subset.
    for g in (g for g in atlas if g.number_of_nodes() == 7):
        base = list(g.edges())
        for mask in range(128):
            check(8, base + [(v, 7) for v in range(7) if mask >> v & 1])
    elapsed = time.perf_counter() - t0
    ok = progress >= 0.01 and mismatches == 0 and elapsed < 60
    acceptance_line("9 deadlock freedom and progress", ok,
                    f"ring16 updates min/max {min(updates)}/{max(updates)}, {checked} graphs checked, "
                    f"{mismatches} mismatches, {elapsed:.1f}s")
    assert series.summary["stopped_by"] == "horizon"
    assert progress >= 0.01
    assert mismatches == 0
    assert elapsed < 60


def _files(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_10_determinism(preset_runs, acceptance_line):
    differing, compared = [], 0
    for name in presets.names():
        _, _, first = preset_runs(name)
        _, _, second = preset_runs(name, tag="rerun")
        a, b = _files(first), _files(second)
        compared += len(a)
        if a.keys() != b.keys():
            differing.append(f"{name}: file sets differ")
            continue
        differing += [f"{name}/{k}" for k in a if a[k] != b[k]]
    kinds = {Path(k).suffix for name in presets.names() for k in _files(preset_runs(name)[2])}
    ok = not differing and {".csv", ".jsonl"} <= kinds
    acceptance_line("10 determinism", ok,
                    f"{len(presets.names())} presets, {compared} files compared, {len(differing)} differ")
    assert {".csv", ".jsonl"} <= kinds
    assert not differing, differing
