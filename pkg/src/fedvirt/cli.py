"""Command line entry point: ``fedvirt run | compare | distill | gradcheck``.

Exit codes: 0 success, 1 failed check or no comparable runs, 2 configuration
error, 3 contract violation or numeric overflow during a run.
"""
import argparse
import json
import os
import sys
import time

from .errors import ConfigError, ContractViolation, NumericOverflowError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_CONTRACT = 0, 1, 2, 3


def _load_config(args):
    from .config import parse_config
    cfg = parse_config(args.config)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "out", None):
        changes["output_dir"] = args.out
    return cfg.replace(**changes) if changes else cfg


def cmd_run(args):
    from .runner import run
    cfg = _load_config(args)
    start = time.perf_counter()

    def progress(row):
        if not args.quiet:
            print(f"round {row['round']:>4}  {row['stage']:<13}  avg acc {row['acc_avg']:.4f}  "
                  f"[{time.perf_counter() - start:7.1f}s]", file=sys.stderr, flush=True)

    out_dir, result = run(cfg, on_round=progress)
    print(f"{cfg.rule}: final average accuracy {result.rows[-1]['acc_avg']:.4f} -> {out_dir}")
    return EXIT_OK


def cmd_compare(args):
    from .runner import compare, format_csv, format_table
    header, rows, failed = compare(args.run_dirs)
    sys.stdout.write(format_table(header, rows, failed))
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(format_csv(header, rows, failed))
    return EXIT_OK if rows else EXIT_FAIL


def cmd_distill(args):
    from . import checkpoint
    from .federation import heterogeneity, initialize, make_clients
    cfg = _load_config(args)
    out_dir = cfg.output_dir
    os.makedirs(os.path.join(out_dir, "virtual"), exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_json())
    clients = make_clients(cfg)
    init = initialize(cfg, clients)
    checkpoint.save_virtual(os.path.join(out_dir, "virtual", "t0_global.fvck"), init.global_virtual)
    for i, v in enumerate(init.client_virtual):
        checkpoint.save_virtual(os.path.join(out_dir, "virtual", f"t0_client{i}.fvck"), v)
    real = heterogeneity(init.global_params, [c.real_train for c in clients], cfg.diag_per_class)
    virt = heterogeneity(init.global_params, init.client_virtual)
    report = {"pairs": [{"a": i, "b": j, "mmd_real": real[(i, j)], "mmd_virtual": virt[(i, j)]}
                        for (i, j) in sorted(real)]}
    with open(os.path.join(out_dir, "distill.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for p in report["pairs"]:
        print(f"clients {p['a']}-{p['b']}: feature MMD real {p['mmd_real']:.6g}  virtual {p['mmd_virtual']:.6g}")
    print(f"virtual data written to {os.path.join(out_dir, 'virtual')}")
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import run_suite
    start = time.perf_counter()
    reports = run_suite(points=args.points, seed=args.seed)
    width = max(len(r.name) for r in reports)
    for r in reports:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  max rel err {r.max_rel_error:.3e}  "
              f"({r.coords_checked} coords)")
    bad = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(bad)}/{len(reports)} checks passed in {time.perf_counter() - start:.1f}s")
    return EXIT_FAIL if bad else EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="fedvirt", description="Federated virtual learning simulator")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment from a JSON config")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help="run directory (overrides output_dir)")
    r.add_argument("--quiet", action="store_true", help="no per-round progress on stderr")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="accuracy table across run directories")
    c.add_argument("run_dirs", nargs="+")
    c.add_argument("--csv", help="also write the table as CSV to this path")
    c.set_defaults(func=cmd_compare)

    d = sub.add_parser("distill", help="stage 1 only: write the initial virtual datasets")
    d.add_argument("--config", required=True)
    d.add_argument("--seed", type=int)
    d.add_argument("--out")
    d.set_defaults(func=cmd_distill)

    g = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    g.add_argument("--points", type=int, default=5)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ContractViolation, NumericOverflowError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
