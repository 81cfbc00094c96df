"""Command-line front end.

Subcommands: ``solve`` (one instance, prints the report), ``simulate``
(closed loop to a trace CSV), ``bench`` (timing table), ``check`` (dense
oracle deviations) and ``config-dump`` (effective configuration echo).

Exit codes: 0 ok, 1 usage error, 2 configuration parse error, 3 solver
non-convergence in ``solve``, 4 oracle violation in ``check``.
"""

import argparse
import sys

import numpy as np

from .builtins import get_bundle
from .bvnlls import solve_bvnlls
from .config import ConfigError, dump_config, parse_config
from .harness import (bench_to_csv, benchmark, compare_dense_oracle,
                      run_closed_loop, trace_to_csv, _cold_start,
                      _reference_window)
from .problem import make_config

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PARSE = 2
EXIT_NOCONV = 3
EXIT_ORACLE = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _load_config(path, args):
    try:
        with open(path) as fh:
            cfg = parse_config(fh.read())
    except OSError as err:
        print(f"cannot read config: {err}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        raise SystemExit(EXIT_PARSE)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "dense", False):
        cfg.dense = True
    if getattr(args, "horizon", None):
        cfg.horizons = args.horizon
    return cfg


def _parse_horizons(raw):
    try:
        vals = [int(p) for p in raw.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad horizon list {raw!r}")
    if vals != sorted(vals):
        raise argparse.ArgumentTypeError("horizons must be ascending")
    return vals


def cmd_solve(args):
    sim = _load_config(args.config, args)
    bundle = get_bundle(sim.model)
    model = bundle.model
    plant = get_bundle(sim.plant).make_plant()
    ic = plant.initial_condition()
    kw = sim.mpc_kwargs()
    kw["y_ref"] = _reference_window(sim, model.n_y, 0)
    cfg = make_config(model, **kw)
    u_ref = np.asarray(kw["u_ref"], dtype=float) if kw["u_ref"] is not None \
        else np.zeros(model.n_u)
    z0 = _cold_start(cfg, ic, u_ref)
    rep = solve_bvnlls(z0, ic, model, cfg, structured=not sim.dense)
    print(f"model            : {sim.model} (Np={cfg.Np}, Nu={cfg.Nu}, "
          f"n={cfg.n}, m={cfg.m})")
    print(f"converged        : {rep.converged}")
    print(f"outer iterations : {rep.iters}")
    print(f"bvls solves      : {rep.bvls_solves}")
    print(f"backtrack cuts   : {rep.ls_backtracks}")
    print(f"objective        : {rep.Phi:.12e}")
    print(f"kkt violation    : {rep.kkt_violation:.3e}")
    print(f"|h|_inf          : {rep.h_inf:.3e}")
    print(f"first input      : {np.array2string(rep.z_star[:model.n_u], precision=8)}")
    print(f"solve time       : {rep.solve_time * 1e3:.2f} ms")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("index,z\n")
            for i, v in enumerate(rep.z_star, start=1):
                fh.write(f"{i},{v:.17g}\n")
        print(f"solution written : {args.out}")
    return EXIT_OK if rep.converged else EXIT_NOCONV


def cmd_simulate(args):
    sim = _load_config(args.config, args)
    bundle = get_bundle(sim.model)
    rows = run_closed_loop(sim, structured=not sim.dense)
    csv = trace_to_csv(rows, bundle.model.n_u, bundle.model.n_y)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(csv)
        bad = sum(0 if r.converged else 1 for r in rows)
        print(f"{len(rows)} steps -> {args.out}"
              + (f" ({bad} steps flagged non-converged)" if bad else ""))
    else:
        sys.stdout.write(csv)
    return EXIT_OK


def cmd_bench(args):
    sim = _load_config(args.config, args)
    results = benchmark(sim)
    csv = bench_to_csv(results)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(csv)
        print(f"bench table -> {args.out}")
    sys.stdout.write(csv)
    for r in results:
        if not r["agree"]:
            print(f"warning: paths disagree at horizon {r['horizon']} "
                  f"(max dev {r['max_z_dev']:.2e})", file=sys.stderr)
    return EXIT_OK


def cmd_check(args):
    kwargs = {}
    if args.config:
        sim = _load_config(args.config, args)
        kwargs["instances"] = sim.check_instances
        kwargs["seed"] = sim.seed
    if args.instances is not None:
        kwargs["instances"] = args.instances
    if args.seed is not None:
        kwargs["seed"] = args.seed
    report = compare_dense_oracle(**kwargs)
    print(f"instances per dims set : {report['instances']}")
    print(f"dims sets              : {report['dims']}")
    print(f"operator deviation     : {report['operator_dev']:.3e} "
          f"(tol 1e-12, relative)")
    print(f"thin-QR deviation      : {report['qr_dev']:.3e} (tol 1e-09)")
    print(f"solver deviation       : {report['solver_dev']:.3e} (tol 1e-09)")
    print(f"elapsed                : {report['elapsed_s']:.2f} s")
    print(f"result                 : {'ok' if report['ok'] else 'VIOLATION'}")
    return EXIT_OK if report["ok"] else EXIT_ORACLE


def cmd_config_dump(args):
    sim = _load_config(args.config, args)
    sys.stdout.write(dump_config(sim))
    return EXIT_OK


def build_parser():
    p = _Parser(prog="boxmpc",
                description="Construction-free MPC solver harness")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("solve", help="solve one instance and print the report")
    sp.add_argument("--config", required=True, help="run configuration file")
    sp.add_argument("--out", help="write the solution vector as CSV")
    sp.add_argument("--dense", action="store_true",
                    help="force the dense reference path")
    sp.set_defaults(fn=cmd_solve)

    sp = sub.add_parser("simulate", help="closed-loop run, trace CSV")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", help="trace CSV path (default: stdout)")
    sp.add_argument("--seed", type=int, help="override sim.seed")
    sp.add_argument("--dense", action="store_true")
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("bench", help="horizon sweep timing table")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", help="bench CSV path")
    sp.add_argument("--horizon", type=_parse_horizons,
                    help="comma-separated horizon override, ascending")
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("check", help="dense-oracle deviations (exit 4 on violation)")
    sp.add_argument("--config", help="optional config for instance count/seed")
    sp.add_argument("--instances", type=int, help="instances per dims set")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(fn=cmd_check)

    sp = sub.add_parser("config-dump", help="echo the effective configuration")
    sp.add_argument("--config", required=True)
    sp.set_defaults(fn=cmd_config_dump)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
