"""Command-line entry point: ``adpsgd <command> ...``.

Exit status is 0 on success, 2 for invalid input and 3 when a run diverges
or deadlocks. The default output directory comes from ``ADPSGD_OUTPUT_DIR``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import presets, theory
from . import topology as tp
from .config import load, resolve
from .errors import DeadlockError, DivergenceError, ValidationError
from .experiment import default_output_dir, dump_json, jsonable, parse_vary, run_experiment, run_sweep

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 2, 3


def _out_dir(args, cfg=None) -> Path:
    if args.out:
        return Path(args.out)
    if cfg is not None and cfg.output.dir:
        return Path(cfg.output.dir)
    return default_output_dir()


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _aligned(pairs: list[tuple[str, object]]) -> str:
    width = max(len(k) for k, _ in pairs)
    return "\n".join(f"{k.ljust(width)}  {_fmt(v)}" for k, v in pairs)


def cmd_run(args) -> int:
    cfg = load(args.config)
    if args.seeds:
        cfg = cfg.replace(seeds=args.seeds)
    if args.plot:
        cfg = cfg.replace(**{"output.plot": True})
    res = run_experiment(cfg, _out_dir(args, cfg))
    s = res.summary
    pairs = [("run", s["name"]), ("algorithm", s["algorithm"]), ("mode", s["mode"]), ("workers", s["n"]),
             ("gamma", s["gamma"]), ("final loss (mean)", s["final_loss"]["mean"]),
             ("avg ||grad||^2 (mean)", s["avg_grad_norm_sq"]["mean"])]
    if s["target_loss"] is not None:
        pairs.append(("time to target (mean)", s["time_to_target"]["mean"]))
    if "epoch_time" in s:
        pairs.append(("epoch time (mean)", s["epoch_time"]["mean"]))
    pairs.append(("output", res.out_dir))
    print(_aligned(pairs))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load(args.config)
    vary = dict(parse_vary(v) for v in args.vary)
    results, sweep = run_sweep(cfg, vary, _out_dir(args, cfg))
    for r in results:
        s = r.summary
        print(f"{s['name']}: final loss {_fmt(s['final_loss']['mean'])}, "
              f"time to target {_fmt(s['time_to_target']['mean'])}")
    if "speedup" in sweep:
        print("n  time_to_target  speedup  ratio_to_ideal")
        for row in sweep["speedup"]:
            print(f"{row['n']:<2} {_fmt(row['time_to_target']):>14}  {_fmt(row['speedup']):>7}  "
                  f"{_fmt(row['ratio_to_ideal']):>14}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    graph = tp.TopologyGraph.load(args.topology)
    rep = tp.analyze(graph)
    colors, cycle = tp.two_coloring(graph)
    info = {
        "n": graph.n,
        "edges": len(graph.edges),
        "max_degree": graph.max_degree,
        "connected": graph.is_connected(),
        "rho": rep.rho,
        "bar_rho": rep.bar_rho,
        "bipartite": colors is not None,
        "odd_cycle": list(cycle) if cycle else None,
        "partition_given": graph.has_partition,
    }
    if args.json:
        print(json.dumps(jsonable(info), indent=2))
    else:
        print(_aligned(list(info.items())))
    return EXIT_OK


def cmd_theory(args) -> int:
    cfg = load(args.config)
    setup = resolve(cfg)
    inp = setup.theory_inputs()
    gap = setup.problem.loss(setup.x0) - setup.problem.f_star_bound
    rep = theory.check(inp, gap)
    info = {**{k: getattr(inp, k) for k in ("n", "M", "L", "T", "rho", "sigma_sq", "varsigma_sq", "K")},
            **rep.to_dict()}
    if not args.json:
        print(_aligned(list(info.items())))
        print()
    print(json.dumps(jsonable(info), indent=2))
    return EXIT_OK


def cmd_preset(args) -> int:
    p = presets.preset(args.name, quick=args.quick)
    if args.emit:
        for path in presets.emit(p, args.emit):
            print(path)
    if args.run:
        out = Path(args.out) if args.out else default_output_dir() / p.name
        report = presets.run_preset(p, out)
        report.pop("results", None)
        report.pop("table", None)
        print(dump_json(report), end="")
        print(f"output: {out}")
    if not args.emit and not args.run:
        print(f"{p.name}: {p.description}")
        for c in p.configs:
            print(f"  {c.name}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="adpsgd", description="Asynchronous decentralized SGD simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one configuration over its seeds")
    p.add_argument("config")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--plot", action="store_true", help="write loss.png")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a grid of configurations")
    p.add_argument("config")
    p.add_argument("--vary", action="append", required=True, metavar="KEY=V1,V2,...")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze-topology", help="spectral and bipartiteness report for a topology file")
    p.add_argument("topology")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("theory-check", help="evaluate convergence constants for a configuration")
    p.add_argument("config")
    p.add_argument("--json", action="store_true", help="print only the JSON document")
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("preset", help=f"named scenarios: {', '.join(presets.names())}")
    p.add_argument("name")
    p.add_argument("--emit", metavar="DIR", help="write the preset's configs as TOML files")
    p.add_argument("--run", action="store_true", help="execute the preset and write its report")
    p.add_argument("--quick", action="store_true", help="smaller budgets and fewer seeds")
    p.add_argument("--out", help="output directory for --run")
    p.set_defaults(func=cmd_preset)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DivergenceError, DeadlockError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except (ValidationError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
