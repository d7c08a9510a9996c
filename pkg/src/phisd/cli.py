"""Command-line front end: ``phisd run|suite|verify|list-problems|list-metrics``.

Exit codes: 0 converged to the requested index, 2 converged to another
index, 3 diverged, 4 iteration budget exhausted, 1 configuration or runtime
error.
"""
import argparse
import sys

from . import harness
from .errors import PhisdError
from .preconditioners import METRICS
from .problems import PROBLEMS


def _u64(text):
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("must be non-negative")
    return value


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=_u64, help="override the config seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--max-iters", type=_positive_int, help="override solver.max_iters")
    common.add_argument("--quiet", action="store_true", help="print nothing but errors")

    parser = argparse.ArgumentParser(prog="phisd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", parents=[common], help="run one experiment config")
    p.add_argument("config", help="config path or bundled config name")
    p = sub.add_parser("suite", parents=[common], help="run a manifest of configs")
    p.add_argument("manifest", help="manifest path or bundled manifest name")
    p = sub.add_parser("verify", parents=[common], help="derivative checks and metric SPD probes")
    p.add_argument("config", help="config path or bundled config name")
    sub.add_parser("list-problems", parents=[common], help="list benchmark problems")
    sub.add_parser("list-metrics", parents=[common], help="list metric types")
    sub.add_parser("list-configs", parents=[common], help="list bundled configs")
    return parser


def _cmd_run(args, say):
    cfg = harness.with_overrides(harness.load_config(args.config), args.seed, args.out, args.max_iters)
    say(f"{cfg.name}: {cfg.problem.name}, metric {'+'.join(s.type for s in cfg.metric.stages)}")
    res = harness.run_experiment(cfg, log=None if args.quiet else say)
    s = res.summary
    rate = "n/a" if s["rate"] is None else f"{s['rate']:.4f}"
    say(
        f"{s['status']} after {s['iterations']} iterations, |g| = {s['final_grad_norm']:.3e}, "
        f"index {s['morse_index']}, rate {rate}, {s['wall_time']:.2f} s"
    )
    say(f"trace: {res.trace_path}")
    return res.exit_code


def _cmd_suite(args, say):
    manifest, path = harness.load_manifest(args.manifest)
    rows, code = harness.run_suite(manifest, path.parent, args.seed, args.out, args.max_iters)
    say(",".join(harness.SUITE_COLUMNS))
    for r in rows:
        say(",".join(str(r.get(c, "")) for c in harness.SUITE_COLUMNS))
    return code


def _cmd_verify(args, say):
    cfg = harness.with_overrides(harness.load_config(args.config), args.seed, args.out, args.max_iters)
    ok, lines = harness.verify(cfg)
    for line in lines:
        say(line)
    say("verify: " + ("ok" if ok else "FAILED"))
    return 0 if ok else harness.ERROR_EXIT


def main(argv=None):
    args = build_parser().parse_args(argv)
    say = (lambda msg: None) if args.quiet else print
    try:
        if args.command == "run":
            return _cmd_run(args, say)
        if args.command == "suite":
            return _cmd_suite(args, say)
        if args.command == "verify":
            return _cmd_verify(args, say)
        table = {"list-problems": PROBLEMS, "list-metrics": METRICS}.get(args.command)
        if table is None:
            table = {name: "" for name in harness.bundled_configs()}
        width = max(len(k) for k in table)
        for name, desc in table.items():
            print(f"{name:<{width}}  {desc}".rstrip())
        return 0
    except (PhisdError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return harness.ERROR_EXIT


if __name__ == "__main__":
    sys.exit(main())
