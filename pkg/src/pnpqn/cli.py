"""Command line interface.

    pnpqn run --config exp.cfg [--solver S] [--seed N] [--out DIR]
    pnpqn verify --suite all
    pnpqn kernels list
    pnpqn protocol check --cmd "python3 -m pnpqn.echo_server" --expect-echo

Exit status: 0 success, 1 failed check or run, 2 usage error,
3 wire-protocol error, 4 transport error.
"""
import argparse
import logging
import sys

import numpy as np

from .errors import ParameterError, ProtocolError, TransportError

logger = logging.getLogger("pnpqn")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_PROTOCOL, EXIT_TRANSPORT = 0, 1, 2, 3, 4


def cmd_run(args):
    from .harness import ExperimentConfig, run_experiment
    cfg = ExperimentConfig.load(args.config)
    changes = {}
    if args.solver:
        changes["solver"] = args.solver
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out:
        changes["out"] = args.out
    if args.workers:
        changes["workers"] = args.workers
    if changes:
        cfg = cfg.replace(**changes)
    summaries = run_experiment(cfg)
    failed = 0
    for s in summaries:
        print(f"{s.image}\t{s.solver}\t{s.status}\titers={s.iterations}\tpsnr={s.final_psnr:.2f}\ttime={s.wall_time:.2f}s")
        for w in s.warnings:
            print(f"  warning: {w}")
        if s.error:
            print(f"  error: {s.error}")
            failed += 1
    print(f"wrote {len(summaries)} run(s) to {cfg.out}")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_verify(args):
    from .verification import verify
    try:
        results = verify(args.suite)
    except KeyError as exc:
        print(exc.args[0], file=sys.stderr)
        return EXIT_USAGE
    bad = 0
    for r in results:
        print(r.line())
        bad += not r.passed
    print(f"{len(results) - bad}/{len(results)} checks passed")
    return EXIT_FAIL if bad else EXIT_OK


def cmd_kernels(args):
    from .operators import BUILTIN_KERNELS, builtin_kernel
    for name, (task, _) in sorted(BUILTIN_KERNELS.items()):
        k = builtin_kernel(name)
        print(f"{name}\t{task}\t{k.shape[0]}x{k.shape[1]}")
    return EXIT_OK


def _parse_shape(text):
    try:
        shape = tuple(int(s) for s in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"shape must be C,H,W; got {text!r}") from None
    if len(shape) != 3 or min(shape) < 1:
        raise argparse.ArgumentTypeError(f"shape must be three positive integers; got {text!r}")
    return shape


def protocol_check(cmd=None, address=None, shape=(3, 16, 16), expect_echo=False, sigma=0.03, seed=0):
    """Handshake a denoiser server; returns a list of ``(label, ok, detail)``."""
    from .protocol import DenoiserClient, PotentialUnavailable, open_transport
    x = np.random.default_rng(seed).uniform(size=shape).astype(np.float32)
    out = []
    with DenoiserClient(open_transport(cmd=cmd, address=address)) as client:
        y = client.denoise(x, sigma)
        ok = y.shape == x.shape and y.dtype == np.float32
        out.append(("denoise shape", ok, f"sent {x.shape}, received {y.shape} {y.dtype}"))
        if expect_echo:
            same = y.tobytes() == x.tobytes()
            out.append(("echo bit-exact", same, "payload identical" if same else "payload differs"))
        try:
            val = client.potential(x, sigma)
            out.append(("potential", np.isfinite(val), f"value {val!r}"))
        except PotentialUnavailable:
            out.append(("potential", True, "declined by server (denoise-only)"))
    return out


def cmd_protocol(args):
    if bool(args.cmd) == bool(args.address):
        print("give exactly one of --cmd or --address", file=sys.stderr)
        return EXIT_USAGE
    try:
        results = protocol_check(args.cmd, args.address, args.shape, args.expect_echo)
    except ProtocolError as exc:
        print(f"protocol error: {exc}")
        return EXIT_PROTOCOL
    except TransportError as exc:
        print(f"transport error: {exc}")
        return EXIT_TRANSPORT
    bad = 0
    for label, ok, detail in results:
        print(f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
        bad += not ok
    return EXIT_FAIL if bad else EXIT_OK


def build_parser():
    from .solvers import SOLVERS
    p = argparse.ArgumentParser(prog="pnpqn", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--solver", choices=sorted(SOLVERS))
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.add_argument("--workers", type=int)
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify", help="run numerical self-checks")
    v.add_argument("--suite", default="all")
    v.set_defaults(func=cmd_verify)

    k = sub.add_parser("kernels", help="kernel utilities")
    ksub = k.add_subparsers(dest="action", required=True)
    ksub.add_parser("list", help="list builtin kernels").set_defaults(func=cmd_kernels)

    pr = sub.add_parser("protocol", help="wire-protocol utilities")
    psub = pr.add_subparsers(dest="action", required=True)
    c = psub.add_parser("check", help="handshake a denoiser server")
    c.add_argument("--cmd", help="command that serves the protocol on stdin/stdout")
    c.add_argument("--address", help="host:port of a TCP server")
    c.add_argument("--shape", type=_parse_shape, default=(3, 16, 16))
    c.add_argument("--expect-echo", action="store_true", help="require a bit-exact echo of the payload")
    c.set_defaults(func=cmd_protocol)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ParameterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
