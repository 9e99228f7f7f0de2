"""Command-line entry points for single runs, sweeps, and the moment audit.

Subcommands: run-lq, run-dubins, study-particles, study-iterations,
audit-moments.  Studies read a JSON config mirroring StudyConfig; --seed,
--trials, and --out override the file.  Outputs are plain CSV/dat files.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional

from . import experiments as exp


def _write_run_csv(out_dir: str, bench: exp.Benchmark, result) -> Path:
    """Per-node table: control at the node, truth state, filter estimate.

    Row n aligns everything at node n; the estimate is the posterior mean
    after assimilating the observation that arrived there (the prior mean at
    node 0).  The final row carries the terminal schedule entry, which is
    optimized but never applied.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    m = result.applied_controls.shape[1]
    d = result.truth_path.states.shape[1]
    cols = ["n", "t"]
    cols += [f"u{j}" for j in range(m)]
    cols += [f"truth{j}" for j in range(d)]
    cols += [f"est{j}" for j in range(d)]
    lines = [",".join(cols)]
    nodes = bench.grid.nodes
    N = bench.grid.N
    estimates = [result.initial_mean] + list(result.cloud_means)
    for n in range(N + 1):
        u = result.applied_controls[n] if n < N else result.final_schedule.entry(N)
        vals = [str(n), "%.17g" % nodes[n]]
        vals += ["%.17g" % v for v in u]
        vals += ["%.17g" % v for v in result.truth_path.states[n]]
        vals += ["%.17g" % v for v in estimates[n]]
        lines.append(",".join(vals))
    path = out / "run.csv"
    path.write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
    return path


def _cmd_run(name: str, args) -> int:
    bench = exp.make_benchmark(name)
    row, result = exp.run_trial(
        name, args.particles, args.iters, 0, args.seed, retain=args.out is not None
    )
    print(f"benchmark={name} S={args.particles} L={args.iters} seed={args.seed}")
    print(f"error={row.error:.6g} realized_cost={row.cost:.6g} wall_ms={row.wall_ms:.0f}")
    if args.out:
        path = _write_run_csv(args.out, bench, result)
        print(f"wrote {path}")
    return 0


def _load_config(args, rule: str) -> exp.StudyConfig:
    if not args.config:
        raise SystemExit("--config <file.json> is required")
    raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
    raw.setdefault("iteration_rule", rule)
    if args.seed is not None:
        raw["base_seed"] = args.seed
    if args.trials is not None:
        raw["trials"] = args.trials
    if args.out is not None:
        raw["output_dir"] = args.out
    raw["particle_counts"] = tuple(raw["particle_counts"])
    cfg = exp.StudyConfig(**raw)
    if cfg.iteration_rule != rule:
        raise SystemExit(f"this subcommand requires iteration_rule={rule!r}")
    return cfg


def _cmd_study(args, rule: str) -> int:
    cfg = _load_config(args, rule)
    runner = exp.convergence_vs_particles if rule == "fixed" else exp.convergence_vs_iterations
    result = runner(cfg, workers=args.workers)
    for a in result.aggregates:
        print(f"S={a.S} L={a.L} mean_error={a.mean_error:.6g} std_error={a.std_error:.6g} trials={a.trials}")
    if cfg.output_dir:
        print(f"wrote {Path(cfg.output_dir) / 'raw.csv'}")
    return 0


def _cmd_audit(args) -> int:
    bench = exp.make_benchmark(args.benchmark)
    _, run = exp.run_trial(args.benchmark, args.particles, args.iters, 0, args.seed, retain=True)
    report = exp.moment_bound_audit(bench.model, bench.grid, run)
    print(report.summary())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["n,bound,empirical"]
        for n in range(len(report.bound)):
            lines.append("%d,%.17g,%.17g" % (n, report.bound[n], report.empirical[n]))
        path = out / "moments.csv"
        path.write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
        print(f"wrote {path}")
    return 0 if report.ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pfsgd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run(name, default_s, default_l):
        p = sub.add_parser(name, help=f"single {name.split('-')[1]} closed-loop run")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--particles", type=int, default=default_s)
        p.add_argument("--iters", type=int, default=default_l)
        p.add_argument("--out", type=str, default=None, help="directory for run.csv")
        return p

    add_run("run-lq", 2048, 10_000)
    add_run("run-dubins", 512, 1000)

    for name in ("study-particles", "study-iterations"):
        p = sub.add_parser(name, help=f"{name.replace('-', ' ')} sweep from a JSON config")
        p.add_argument("--config", type=str, required=True)
        p.add_argument("--seed", type=int, default=None, help="override base_seed")
        p.add_argument("--trials", type=int, default=None, help="override trials")
        p.add_argument("--out", type=str, default=None, help="override output_dir")
        p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("audit-moments", help="second-moment audit of one retained run")
    p.add_argument("--benchmark", choices=("lq", "dubins"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--particles", type=int, default=512)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--out", type=str, default=None)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run-lq":
        return _cmd_run("lq", args)
    if args.command == "run-dubins":
        return _cmd_run("dubins", args)
    if args.command == "study-particles":
        return _cmd_study(args, "fixed")
    if args.command == "study-iterations":
        return _cmd_study(args, "squared")
    if args.command == "audit-moments":
        return _cmd_audit(args)
    raise AssertionError(f"unhandled command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
