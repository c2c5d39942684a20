"""Command line interface: ``evogen <command> [<subcommand>] [options]``.

Every table is written with a header row naming its columns and a ``seed``
column; JSON-lines outputs start with a header record carrying the seed.
Floats are written with ``repr`` so reruns are byte-identical.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys

import numpy as np

from . import coalescent, experiments, geo, measrep, moran


def _plain(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        return repr(float(x)) if math.isfinite(x) else str(float(x))
    if x is None:
        return ""
    return x


def write_table(path, columns, rows, fmt="csv", seed=None):
    columns = ["seed"] + list(columns)
    with open(path, "w", newline="") as fh:
        if fmt == "csv":
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for row in rows:
                w.writerow([_plain(seed)] + [_plain(v) for v in row])
        else:
            fh.write(json.dumps({"kind": "header", "columns": columns, "seed": seed}) + "\n")
            for row in rows:
                rec = dict(zip(columns, [seed] + [_jsonable(v) for v in row]))
                fh.write(json.dumps(rec) + "\n")


def _jsonable(x):
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x


def _load_json(path):
    with open(path) as fh:
        return json.load(fh)


def _out(args, name):
    os.makedirs(args.out, exist_ok=True)
    ext = "csv" if args.format == "csv" else "jsonl"
    return os.path.join(args.out, f"{name}.{ext}")


def _kernel(args, d):
    if getattr(args, "kernel", None):
        return geo.MigrationKernel.from_json(args.kernel)
    return geo.MigrationKernel.simple(d)


# --------------------------------------------------------------------------
# commands


def cmd_geo_dconst(args):
    kernel = _kernel(args, args.d)
    est = geo.green_integral(geo.symmetrize(kernel), truncation=args.truncation, method=args.method,
                             seed=args.seed)
    D = math.nan if est.divergent else geo.diffusion_constant(args.gamma, est)
    path = _out(args, "dconst")
    write_table(path, ["d", "gamma", "method", "truncation", "green", "partial", "tail",
                       "stderr", "divergent", "D"],
                [[kernel.d, args.gamma, est.method, est.truncation, est.value, est.partial,
                  est.tail, est.stderr, int(est.divergent), D]], args.format, args.seed)
    print(path)
    return 0


def _moran_config(args) -> moran.MoranConfig:
    obj = _load_json(args.config)
    obj["seed"] = args.seed
    return moran.MoranConfig.from_dict(obj)


def cmd_moran_simulate(args):
    cfg = _moran_config(args)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for r in range(args.replicates):
        log = moran.simulate(cfg, replicate=r, stop_at_fixation=args.stop_at_fixation)
        path = os.path.join(args.out, f"events_{r}.jsonl")
        log.write_jsonl(path)
        rows.append([r, cfg.n, log.n_events, log.end_time, log.fixation_time, int(log.truncated), path])
    summary = _out(args, "moran_runs")
    write_table(summary, ["replicate", "n", "events", "end_time", "fixation_time", "truncated", "log"],
                rows, args.format, args.seed)
    print(summary)
    return 0


def cmd_moran_snapshot(args):
    log = moran.EventLog.read_jsonl(args.log)
    u = moran.genealogy_snapshot(log, args.t)
    D = u.distance_matrix()
    rows = [[i, j, u.labels[i], u.labels[j], D[i, j]]
            for i in range(u.n_leaves) for j in range(u.n_leaves)]
    path = _out(args, "snapshot_distances")
    write_table(path, ["i", "j", "label_i", "label_j", "distance"], rows, args.format, log.seed)
    rows = [[u.labels[i], u.masses[i], json.dumps(u.marks[i] if u.marks else None, sort_keys=True)]
            for i in range(u.n_leaves)]
    path2 = _out(args, "snapshot_leaves")
    write_table(path2, ["label", "mass", "marks"], rows, args.format, log.seed)
    print(path, path2, sep="\n")
    return 0


def _merge_rows(path, replicate):
    for e in range(path.kinds.size):
        kind = "merge" if path.kinds[e] == coalescent.MERGE else "relabel"
        yield [replicate, int(path.ticks[e]), float(path.times[e]), kind, int(path.x[e]), int(path.y[e])]


def cmd_coal_simulate(args):
    torus = geo.GeoTorus.single_site() if args.d == 0 else geo.GeoTorus(args.d, args.N)
    kernel = _kernel(args, torus.d).reversed()
    rows = []
    for r in range(args.replicates):
        p = coalescent.simulate_spatial_kingman(args.n, torus, args.gamma, kernel, t_max=args.t_max,
                                                seed=args.seed, replicate=r, stop_at=args.stop_at)
        rows.extend(_merge_rows(p, r))
    path = _out(args, "coalescent")
    write_table(path, ["replicate", "tick", "h", "kind", "x", "y"], rows, args.format, args.seed)
    print(path)
    return 0


def cmd_coal_from_log(args):
    log = moran.EventLog.read_jsonl(args.log)
    p = coalescent.from_event_log(log, args.T)
    path = _out(args, "coalescent")
    write_table(path, ["replicate", "tick", "h", "kind", "x", "y"], list(_merge_rows(p, 0)),
                args.format, log.seed)
    print(path)
    return 0


def cmd_measrep_build(args):
    log = moran.EventLog.read_jsonl(args.log)
    p = measrep.build_measure_representation(log, args.T, seed=args.seed)
    path = os.path.join(args.out, "measrep.jsonl")
    os.makedirs(args.out, exist_ok=True)
    p.write_jsonl(path, seed=args.seed)
    print(path)
    return 0


def cmd_measrep_mrca(args):
    rows = []
    for k, f in enumerate(args.log):
        log = moran.EventLog.read_jsonl(f)
        p = measrep.build_measure_representation(log, args.T, seed=args.seed)
        rows.append([k, args.T, measrep.mrca_time(p)])
    path = _out(args, "mrca")
    write_table(path, ["replicate", "anchor", "mrca"], rows, args.format, args.seed)
    print(path)
    return 0


def cmd_measrep_pairdist(args):
    logs = [moran.EventLog.read_jsonl(f) for f in args.log]
    grid = [float(x) for x in args.h_grid.split(",")]
    rows = []
    for h in grid:
        vals = [measrep.anchored_stats(log, args.T, [h]).square_sums[0] for log in logs]
        se = float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else math.nan
        rows.append([args.T, h, len(vals), float(np.mean(vals)), se])
    path = _out(args, "pairdist")
    write_table(path, ["anchor", "h", "replicates", "moment", "stderr"], rows, args.format, args.seed)
    print(path)
    return 0


def cmd_fss(args):
    obj = _load_json(args.config) if args.config else {}
    obj["seed"] = args.seed
    if args.replicates_given:
        obj["replicates"] = args.replicates
    cfg = experiments.FssConfig.from_dict(obj)
    report = experiments.fss_experiment(cfg)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "fss_report.json"), "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True, default=_jsonable)
    rows = []
    for s in report["sizes"]:
        for j, h in enumerate(cfg.grid):
            rows.append([s["N"], s["volume"], h, s["mrca_mean"], s["mrca_se"], s["mrca_gap"],
                         s["ks"][j], s["pair_cdf"][j], s["pair_target"][j], s["truncated"]])
    path = _out(args, "fss")
    write_table(path, ["N", "volume", "h", "mrca_mean", "mrca_se", "mrca_gap", "ks", "pair_cdf",
                       "pair_target", "truncated"], rows, args.format, args.seed)
    print(path)
    return 0


def cmd_check(args):
    res = experiments.invariant_suite(args.seed, args.replicates)
    path = _out(args, "check")
    write_table(path, ["check", "instances", "failures", "first_failure"],
                [[r["check"], r["instances"], r["failures"], r["first_failure"]] for r in res],
                args.format, args.seed)
    for r in res:
        print(f"{r['check']}: {'PASS' if r['failures'] == 0 else 'FAIL'} "
              f"({r['failures']}/{r['instances']} failures)")
    return 0 if all(r["failures"] == 0 for r in res) else 1


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    def flags(suppress):
        dflt = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        p = argparse.ArgumentParser(add_help=False)
        p.add_argument("--seed", type=int, default=dflt(0))
        p.add_argument("--replicates", type=int, default=dflt(None))
        p.add_argument("--out", default=dflt("."))
        p.add_argument("--format", choices=["csv", "jsonl"], default=dflt("csv"))
        return p

    # global flags are accepted before or after the subcommand; the
    # subcommand copies must not reset values given earlier
    common = flags(True)
    ap = argparse.ArgumentParser(prog="evogen", parents=[flags(False)],
                                 description="Evolving genealogies of spatial Moran models.")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("geo", parents=[common]).add_subparsers(dest="sub", required=True)
    p = g.add_parser("d-const", parents=[common], help="Green integral and diffusion constant D")
    p.add_argument("--d", type=int, default=3)
    p.add_argument("--kernel", help="JSON file with offsets and probs")
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--truncation", type=int, default=256)
    p.add_argument("--method", choices=["power-sum", "monte-carlo"], default="power-sum")
    p.set_defaults(func=cmd_geo_dconst)

    m = sub.add_parser("moran", parents=[common]).add_subparsers(dest="sub", required=True)
    p = m.add_parser("simulate", parents=[common], help="simulate event logs from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--stop-at-fixation", action="store_true")
    p.set_defaults(func=cmd_moran_simulate)
    p = m.add_parser("snapshot", parents=[common], help="genealogy at time t of a log")
    p.add_argument("--log", required=True)
    p.add_argument("--t", type=float, required=True)
    p.set_defaults(func=cmd_moran_snapshot)

    c = sub.add_parser("coal", parents=[common]).add_subparsers(dest="sub", required=True)
    p = c.add_parser("simulate", parents=[common], help="spatial Kingman coalescent")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--d", type=int, default=0)
    p.add_argument("--N", type=int, default=1)
    p.add_argument("--kernel")
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--t-max", type=float, default=math.inf)
    p.add_argument("--stop-at", type=int, default=1)
    p.set_defaults(func=cmd_coal_simulate)
    p = c.add_parser("from-log", parents=[common], help="coalescent read backwards from a log")
    p.add_argument("--log", required=True)
    p.add_argument("--T", type=float, required=True)
    p.set_defaults(func=cmd_coal_from_log)

    r = sub.add_parser("measrep", parents=[common]).add_subparsers(dest="sub", required=True)
    p = r.add_parser("build", parents=[common], help="measure representation anchored at T")
    p.add_argument("--log", required=True)
    p.add_argument("--T", type=float, required=True)
    p.set_defaults(func=cmd_measrep_build)
    p = r.add_parser("mrca", parents=[common], help="MRCA time from the anchor, per log")
    p.add_argument("--log", nargs="+", required=True)
    p.add_argument("--T", type=float, default=0.0)
    p.set_defaults(func=cmd_measrep_mrca)
    p = r.add_parser("pairdist", parents=[common], help="mean sum of squared atom masses")
    p.add_argument("--log", nargs="+", required=True)
    p.add_argument("--T", type=float, default=0.0)
    p.add_argument("--h-grid", required=True, help="comma separated heights")
    p.set_defaults(func=cmd_measrep_pairdist)

    p = sub.add_parser("fss", parents=[common], help="finite-system-scheme experiment")
    p.add_argument("--config")
    p.set_defaults(func=cmd_fss)

    p = sub.add_parser("check", parents=[common], help="run the invariant suite")
    p.set_defaults(func=cmd_check)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.replicates_given = args.replicates is not None
    if args.replicates is None:
        args.replicates = 20 if args.command == "check" else 1
    if args.replicates < 1:
        print("--replicates must be positive", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ValueError, OSError, geo.DivergentGreenError) as exc:
        print(f"evogen: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
