import json
import math
import os

import numpy as np
import pytest
from numpy.testing import assert_allclose

from adpsgd import cli, presets
from adpsgd import experiment as ex
from adpsgd import metrics
from adpsgd.config import RunConfig, load, loads
from adpsgd.errors import ConfigError, DivergenceError, ValidationError

GOLDEN_HEADER = (
    "k,simulated_time,loss_avg_model,grad_norm_sq_avg_model,consensus_Mk,max_staleness,"
    "worker_updates_0,worker_updates_1,worker_updates_2"
)


def small(**changes):
    base = RunConfig(iterations=200, record_every=50, seeds=[0, 1])
    return base.replace(**{"problem.dim": 3, "problem.num_samples": 20, "problem.noise": 0.5, **changes})


class TestConsensus:
    def test_equal_columns(self):
        assert metrics.consensus_Mk(np.ones((3, 4))) == 0.0

    def test_two_scalars(self):
        assert metrics.consensus_Mk(np.array([[0.0, 2.0]]), [0.5, 0.5]) == pytest.approx(1.0)

    def test_single_worker(self):
        assert metrics.consensus_Mk(np.array([[5.0], [-1.0]])) == 0.0

    def test_weights(self):
        # deviations from the mean 1 are -1 and +1 in each of two coordinates
        X = np.array([[0.0, 2.0], [0.0, 2.0]])
        assert metrics.consensus_Mk(X, [0.25, 0.75]) == pytest.approx(2.0)


class TestConfig:
    def test_round_trip(self):
        cfg = small(algorithm="dpsgd", **{"speed.slowdown": [{"target": "worker", "index": 1, "factor": 2.0}]})
        assert loads(cfg.dumps()) == cfg

    def test_error_names_line(self):
        text = 'name = "x"\niterations = 10\n\n[problem]\ndim = 3\nnoise = -1.0\n'
        with pytest.raises(ConfigError, match=r"problem\.noise \(line 6\)"):
            loads(text)

    def test_type_error_names_line(self):
        with pytest.raises(ConfigError, match=r"line 2"):
            loads('iterations = 10\nbatch_size = "four"\n')

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            loads("iterations = 10\n[topology]\nsize = 3\n")

    def test_syntax_error(self):
        with pytest.raises(ConfigError):
            loads("iterations = \n")

    def test_corollary_needs_budget(self):
        with pytest.raises(ConfigError, match="iterations"):
            loads('mode = "simulate"\nhorizon = 10.0\ngamma = "corollary"\n')

    def test_empty_seeds(self):
        with pytest.raises(ValidationError):
            small(seeds=[])

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load(tmp_path / "absent.toml")


class TestCsv:
    def test_golden_header(self):
        s = ex.run_experiment(small(**{"topology.n": 3}), write=False).series[0]
        lines = s.to_csv().splitlines()
        assert lines[0] == GOLDEN_HEADER
        assert all(len(l.split(",")) == 9 for l in lines)

    def test_golden_rows(self):
        # f(x) = (x - 1)^2 / 2 from x = 0 with gamma = 0.5: loss 0.5 * 0.25^k.
        cfg = RunConfig(algorithm="sgd", gamma=0.5, iterations=2, record_every=1).replace(
            **{"topology.n": 1, "problem.dim": 1, "problem.condition": 1.0, "problem.num_samples": 1})
        text = ex.run_experiment(cfg, write=False).series[0].to_csv()
        assert text == (
            "k,simulated_time,loss_avg_model,grad_norm_sq_avg_model,consensus_Mk,max_staleness,worker_updates_0\n"
            "0,nan,0.5,1.0,0.0,0,0\n"
            "1,nan,0.125,0.25,0.0,0,1\n"
            "2,nan,0.03125,0.0625,0.0,0,2\n"
        )

    def test_read_back(self):
        s = ex.run_experiment(small(), write=False).series[0]
        rows = metrics.read_csv(s.to_csv())
        assert_allclose([r["loss_avg_model"] for r in rows], s.column("loss_avg_model"))


class TestRunExperiment:
    def test_artifacts(self, tmp_path):
        res = ex.run_experiment(small(name="demo", target_loss=1e9), tmp_path)
        d = tmp_path / "demo"
        assert sorted(p.name for p in d.iterdir()) == ["config.toml", "metrics_seed0.csv", "metrics_seed1.csv",
                                                        "summary.json"]
        summary = json.loads((d / "summary.json").read_text())
        assert summary["seeds"] == [0, 1]
        assert summary["time_to_target"]["mean"] == 0.0
        assert load(d / "config.toml") == res.config
        assert not [p for p in d.iterdir() if p.name.startswith(".")]

    def test_aggregate_matches_seeds(self):
        res = ex.run_experiment(small(), write=False)
        agg = res.summary["aggregate"]
        table = np.array([s.column("loss_avg_model") for s in res.series])
        assert_allclose(agg["loss_avg_model"]["mean"], table.mean(axis=0))
        assert_allclose(agg["loss_avg_model"]["std"], table.std(axis=0))

    def test_seeds_identical_without_noise(self, tmp_path):
        cfg = small(name="det", algorithm="allreduce",
                    **{"topology.n": 4, "problem.num_samples": 1, "problem.noise": 0.0})
        ex.run_experiment(cfg, tmp_path)
        a = (tmp_path / "det" / "metrics_seed0.csv").read_text()
        b = (tmp_path / "det" / "metrics_seed1.csv").read_text()
        assert a == b

    def test_simulated_run_writes_trace_and_epoch_time(self, tmp_path):
        cfg = small(name="sim", mode="simulate", iterations=None, horizon=30.0, **{"topology.n": 2})
        res = ex.run_experiment(cfg, tmp_path)
        assert (tmp_path / "sim" / "trace_seed0.jsonl").exists()
        assert res.summary["epoch_time"]["mean"] == pytest.approx(20.0)

    def test_divergence_carries_context(self):
        with np.errstate(over="ignore", invalid="ignore"), pytest.raises(DivergenceError, match="run 'boom', seed 0"):
            ex.run_experiment(small(name="boom", gamma=100.0, iterations=5000, **{"problem.condition": 10.0}),
                              write=False)

    def test_plot(self, tmp_path):
        pytest.importorskip("matplotlib")
        ex.run_experiment(small(name="pic", seeds=[0], **{"output.plot": True}), tmp_path)
        assert (tmp_path / "pic" / "loss.png").stat().st_size > 0


class TestSweep:
    def test_parse_vary(self):
        assert ex.parse_vary("topology.n=1,2,4") == ("topology.n", [1, 2, 4])
        assert ex.parse_vary("algorithm=sgd, dpsgd") == ("algorithm", ["sgd", "dpsgd"])
        with pytest.raises(ValidationError):
            ex.parse_vary("topology.n")

    def test_speedup_recomputable_from_csv(self, tmp_path):
        cfg = RunConfig(name="sp", mode="simulate", gamma=0.05, iterations=4000, seeds=[0, 1], record_every=5,
                        target_gap=0.2, stop_at_target=True).replace(
            **{"problem.dim": 3, "problem.num_samples": 50, "problem.noise": 0.3, "problem.init": "random",
               "speed.link_time": 0.01})
        results, sweep = ex.run_sweep(cfg, {"topology.n": [1, 2, 4]}, tmp_path)
        rows = {int(r["n"]): r for r in metrics.read_csv((tmp_path / "sp-speedup.csv").read_text())}
        means = {}
        for r in results:
            target = r.summary["target_loss"]
            times = []
            for seed in r.config.seeds:
                recs = metrics.read_csv((tmp_path / r.config.name / f"metrics_seed{seed}.csv").read_text())
                times.append(next(x["simulated_time"] for x in recs if x["loss_avg_model"] <= target))
            means[r.setup.n] = float(np.mean(times))
        for n, t in means.items():
            assert rows[n]["time_to_target"] == pytest.approx(t, rel=1e-12)
            assert rows[n]["speedup"] == pytest.approx(means[1] / t, rel=1e-12)
        assert [r["n"] for r in sweep["speedup"]] == [1, 2, 4]


class TestAtomicWrite:
    def test_replaces(self, tmp_path):
        p = tmp_path / "a.txt"
        ex.write_atomic(p, "one")
        ex.write_atomic(p, "two")
        assert p.read_text() == "two"
        assert os.listdir(tmp_path) == ["a.txt"]

    def test_failure_keeps_old_file(self, tmp_path):
        p = tmp_path / "a.txt"
        ex.write_atomic(p, "old")
        with pytest.raises(TypeError):
            ex.write_atomic(p, 123)
        assert p.read_text() == "old"
        assert os.listdir(tmp_path) == ["a.txt"]

    def test_jsonable(self):
        assert ex.jsonable({"a": math.inf, "b": np.float64(2.0), "c": (np.int64(3),)}) == {"a": None, "b": 2.0,
                                                                                           "c": [3]}


class TestPresets:
    def test_unknown_lists_names(self):
        with pytest.raises(ValidationError, match="consistency-sgd"):
            presets.preset("nope")

    def test_consistency_pair(self):
        p = presets.preset("consistency-sgd")
        a, b = p.configs
        assert (a.algorithm, b.algorithm) == ("adpsgd", "sgd")
        assert a.topology.n == b.topology.n == 1 and a.seeds == b.seeds
        assert a.staleness.mode == "zero"

    def test_straggler_grid(self):
        p = presets.preset("straggler")
        assert {c.topology.n for c in p.configs} == {16}
        factors = {c.speed.slowdown[0].factor if c.speed.slowdown else 1.0 for c in p.configs}
        assert factors == {1.0, 2.0, 10.0, 100.0}

    def test_speedup_workers(self):
        p = presets.preset("linear-speedup")
        assert [c.topology.n for c in p.configs] == [1, 2, 4, 8]
        assert all(c.gamma == "corollary" for c in p.configs)

    def test_emit_round_trip(self, tmp_path):
        p = presets.preset("convergence-rate")
        paths = presets.emit(p, tmp_path)
        assert [load(x) for x in paths if x.suffix == ".toml"] == p.configs
        assert json.loads((tmp_path / "preset.json").read_text())["name"] == "convergence-rate"

    def test_straggler_10x_table(self, tmp_path):
        p = presets.preset("straggler-10x", quick=True)
        rep = presets.run_preset(p, tmp_path)
        rows = {(r["algorithm"], r["factor"]): r["increase"] for r in rep["table"]}
        assert rows[("adpsgd", 10.0)] < 1.15
        assert rows[("allreduce", 10.0)] > 5


class TestCli:
    def write_config(self, tmp_path, text):
        path = tmp_path / "c.toml"
        path.write_text(text)
        return str(path)

    def test_run(self, tmp_path, capsys):
        cfg = self.write_config(tmp_path, 'name = "cli"\niterations = 50\nrecord_every = 10\n[problem]\ndim = 2\n')
        assert cli.main(["run", cfg, "--out", str(tmp_path / "out")]) == 0
        assert (tmp_path / "out" / "cli" / "metrics_seed0.csv").exists()
        assert "final loss" in capsys.readouterr().out

    def test_env_output_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv(ex.OUTPUT_ENV, str(tmp_path / "envout"))
        cfg = self.write_config(tmp_path, 'name = "e"\niterations = 5\n')
        assert cli.main(["run", cfg]) == 0
        assert (tmp_path / "envout" / "e" / "summary.json").exists()

    def test_invalid_config_exit_2(self, tmp_path, capsys):
        cfg = self.write_config(tmp_path, "iterations = 5\n[topology]\nn = 0\n")
        assert cli.main(["run", cfg, "--out", str(tmp_path)]) == 2
        assert "line 3" in capsys.readouterr().err

    def test_missing_file_exit_2(self, tmp_path):
        assert cli.main(["run", str(tmp_path / "nope.toml")]) == 2

    def test_divergence_exit_3(self, tmp_path):
        cfg = self.write_config(tmp_path, "gamma = 100.0\niterations = 5000\n[problem]\ncondition = 10.0\n")
        with np.errstate(over="ignore", invalid="ignore"):
            assert cli.main(["run", cfg, "--out", str(tmp_path)]) == 3

    def test_deadlock_exit_3(self, tmp_path):
        cfg = self.write_config(tmp_path, 'mode = "simulate"\nhorizon = 50.0\n[topology]\nn = 3\n'
                                          '[speed]\nprotocol = "naive"\nlink_time = 0.1\n')
        assert cli.main(["run", cfg, "--out", str(tmp_path)]) == 3

    def test_sweep(self, tmp_path, capsys):
        cfg = self.write_config(tmp_path, 'name = "sw"\niterations = 20\n[problem]\ndim = 2\n')
        assert cli.main(["sweep", cfg, "--vary", "topology.n=1,2", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "sw-sweep.json").exists() and (tmp_path / "sw-speedup.csv").exists()

    def test_analyze_topology(self, tmp_path, capsys):
        from adpsgd import topology as tp

        path = tmp_path / "g.json"
        tp.build_ring(5).save(path)
        assert cli.main(["analyze-topology", str(path), "--json"]) == 0
        info = json.loads(capsys.readouterr().out)
        assert info["bipartite"] is False and info["odd_cycle"] == [0, 1, 2, 3, 4]
        assert info["connected"] is True

    def test_theory_check(self, tmp_path, capsys):
        cfg = self.write_config(tmp_path, 'gamma = "corollary"\niterations = 100\n[topology]\nn = 1\n')
        assert cli.main(["theory-check", cfg]) == 0
        out = capsys.readouterr().out
        text, _, doc = out.partition("\n\n")
        assert "C1" in text
        assert json.loads(doc)["n"] == 1
        assert cli.main(["theory-check", cfg, "--json"]) == 0
        assert "C3" in json.loads(capsys.readouterr().out)

    def test_preset_emit(self, tmp_path, capsys):
        assert cli.main(["preset", "straggler", "--emit", str(tmp_path)]) == 0
        assert len(list(tmp_path.glob("*.toml"))) == 12

    def test_unknown_preset_exit_2(self, capsys):
        assert cli.main(["preset", "bogus"]) == 2
        assert "theory-grid" in capsys.readouterr().err
