"""Command-line entry points.

Subcommands:

- ``simulate``: run one genealogy and write the event log as CSV;
- ``coalesce``: sample from a stored event log and write pairwise
  coalescence times (and optionally a Newick tree);
- ``limit``: evaluate the limiting coalescence-time survival function or
  sample limiting trees to CSV;
- ``experiment``: run a convergence experiment from a JSON config;
- ``diagnose``: drift or coupling diagnostics from the same config schema.

``experiment`` and ``diagnose`` exit 0 only if every configured pass
threshold was met.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from random import Random

from . import coalescent, genealogy, harness, limits, simulator
from .rates import RateSchedule, schedule_from_json


def _load_schedule(arg: str) -> RateSchedule:
    text = arg
    if not arg.lstrip().startswith("{"):
        with open(arg) as fh:
            text = fh.read()
    return schedule_from_json(text)


def _cmd_simulate(args) -> int:
    schedule = _load_schedule(args.schedule)
    stop = simulator.parse_stop_spec(args.stop)
    run = simulator.simulate(schedule, args.kappa, stop, args.seed)
    genealogy.write_event_log_csv(run.log, args.out)
    size = genealogy.replay(run.log, run.stop_time).size
    print(f"outcome={run.outcome.value} events={len(run.log)} "
          f"stop_time={run.stop_time!r} final_size={size}")
    return 0


def _cmd_coalesce(args) -> int:
    log = genealogy.read_event_log_csv(args.run)
    # The CSV does not carry a stopping record; sample at the final event time.
    stop_time = log.end_time
    run = simulator.SimulationRun(
        schedule=None, kappa=0, seed=0, log=log, stop_time=stop_time,
        outcome=simulator.Outcome.STOPPED)
    if args.mode == "simple":
        sample = coalescent.sample_without_replacement(run, args.m, args.seed)
    else:
        rng = Random(args.seed)
        marks = [rng.random() for _ in range(args.m)]
        sample = coalescent.sample_by_marks(run, marks)
        if sample.ghost:
            print("population extinct at sampling time (ghost sample)",
                  file=sys.stderr)
            return 1
    mat = coalescent.coalescence_matrix(run, sample)
    if args.tau_out:
        with open(args.tau_out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["i", "j", "tau"])
            for i in range(mat.m):
                for j in range(i + 1, mat.m):
                    writer.writerow([i + 1, j + 1, repr(mat.tau[i][j])])
    if args.newick:
        tree = coalescent.tree_from_matrix(mat)
        with open(args.newick, "w") as fh:
            fh.write(genealogy.to_newick(tree) + "\n")
    print(f"sampled {mat.m} individuals at t={stop_time!r}")
    return 0


def _cmd_limit(args) -> int:
    if args.eval is None and args.sample is None:
        print("limit: nothing to do (use --eval or --sample)", file=sys.stderr)
        return 2
    if args.eval is not None:
        times = [float(tok) for tok in args.eval.split(",") if tok.strip()]
        value = limits.ctimes_survival(args.r, args.m, times)
        print(repr(value))
    if args.sample is not None:
        params = limits.BinaryBDParams(birth=args.r)
        header = [f"sigma_{i}" for i in range(1, args.m)] + ["topology"]
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for k in range(args.sample):
                tree = limits.sample_limit_tree(
                    params, args.m, simulator.derive_seed(args.seed, k))
                writer.writerow([repr(t) for t in tree.times]
                                + [tree.topology_string()])
        print(f"wrote {args.sample} trees to {args.out}")
    return 0


def _cmd_experiment(args) -> int:
    with open(args.config) as fh:
        doc = json.load(fh)
    cfg = harness.ExperimentConfig.from_json_dict(doc)
    cfg.out_dir = args.out_dir
    report = harness.convergence_study(cfg)
    for row in report.rows:
        print(f"kappa={row['kappa']} retained={row['retained']} "
              f"ks={row['ks']:.4f} threshold={row['threshold']:.4f} "
              f"passed={row['passed']}")
    print(f"monotone_within_noise={report.monotone_within_noise} "
          f"all_ks_passed={report.all_ks_passed}")
    return 0 if report.passed else 1


def _cmd_diagnose(args) -> int:
    with open(args.config) as fh:
        doc = json.load(fh)
    cfg = harness.ExperimentConfig.from_json_dict(doc)
    os.makedirs(args.out_dir, exist_ok=True)
    if args.mode == "drift":
        grid = cfg.time_grid or cfg.default_times()
        report = harness.drift_diagnostic(
            cfg.schedule, cfg.kappas[-1], cfg.stop, grid,
            cfg.replicates, cfg.master_seed, cfg.event_budget)
        harness.write_drift_csv(report, os.path.join(args.out_dir, "drift.csv"))
        for row in report.rows:
            print(f"t={row['t']} estimate={row['estimate']:.6g} "
                  f"stderr={row['stderr']:.2g}")
        print(f"loglog_slope={report.slope} stderr={report.slope_stderr}")
        return 0 if report.slope_at_most(-1.0) else 1
    horizon = (cfg.horizons or [2.0 / cfg.intrinsic_growth])[0]
    rows = harness.coupling_diagnostic(cfg.schedule, cfg.kappas, horizon,
                                       cfg.replicates, cfg.master_seed)
    harness.write_coupling_csv(rows, os.path.join(args.out_dir, "coupling.csv"))
    for r in rows:
        print(f"kappa={r.kappa} direct={r.p_direct:.4f} "
              f"exponential={r.p_exponential:.4f} consistent={r.consistent}")
    return 0 if all(r.consistent for r in rows) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="logicoal",
        description="Density-dependent branching processes and their coalescent trees")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate one genealogy to CSV")
    p.add_argument("--schedule", required=True,
                   help="schedule descriptor: JSON file path or inline JSON")
    p.add_argument("--kappa", type=int, required=True)
    p.add_argument("--stop", required=True,
                   help='"time:3.0" | "size:0.1" | "logsize:0.5"')
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="event-log CSV path")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("coalesce", help="sample and extract coalescence times")
    p.add_argument("--run", required=True, help="event-log CSV path")
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--mode", choices=["simple", "marks"], default="simple")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--newick", help="optional Newick output path")
    p.add_argument("--tau-out", dest="tau_out", help="pairwise tau CSV path")
    p.set_defaults(func=_cmd_coalesce)

    p = sub.add_parser("limit", help="limiting coalescent-tree law")
    p.add_argument("--r", type=float, required=True, help="growth rate")
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--eval", help="comma-separated times t1,..,t_{m-1}")
    p.add_argument("--sample", type=int, help="number of trees to sample")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path for sampled trees")
    p.set_defaults(func=_cmd_limit)

    p = sub.add_parser("experiment", help="convergence experiment from JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.set_defaults(func=_cmd_experiment)

    p = sub.add_parser("diagnose", help="drift or coupling diagnostics")
    p.add_argument("--mode", choices=["drift", "coupling"], required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.set_defaults(func=_cmd_diagnose)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
