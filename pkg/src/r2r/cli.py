"""Command line entry point: ``r2r run|verify|flops|export-filters|build``.

Exit status is 0 on success, 1 for usage or configuration errors and 2 for
runtime failures (including failed verification).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import ConfigError, R2RError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_common(p, default):
    p.add_argument("--seed", type=int, default=default, help="override the seed")
    p.add_argument("--f64", action="store_true", default=default if default is not None else False,
                   help="use float64 instead of float32")
    p.add_argument("--data-dir", default=default, help="directory holding the CIFAR-10 binary batches")
    p.add_argument("--out", default=default, help="output directory or file")
    p.add_argument("-v", "--verbose", action="store_true", default=default if default is not None else False)


def build_parser():
    p = _Parser(prog="r2r", description=__doc__.splitlines()[0])
    _add_common(p, None)
    # the same flags are accepted after the subcommand too
    common = _Parser(add_help=False)
    _add_common(common, argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", parents=[common], help="train one or more runs from a JSON config")
    run.add_argument("config")

    ver = sub.add_parser("verify", parents=[common], help="run the randomised function-preservation suite")
    ver.add_argument("--trials", type=int, default=50)

    fl = sub.add_parser("flops", parents=[common], help="print FLOP counts of a checkpoint")
    fl.add_argument("checkpoint")

    ex = sub.add_parser("export-filters", parents=[common], help="write a node's filters as PGM/PPM images")
    ex.add_argument("checkpoint")
    ex.add_argument("node")

    b = sub.add_parser("build", parents=[common], help="write a freshly initialised architecture to a checkpoint")
    b.add_argument("family")
    b.add_argument("--width", type=float, default=1.0)
    b.add_argument("--no-residual", action="store_true")
    return p


def _cmd_run(args):
    from .runner import load_configs, run_experiment, run_many

    configs = load_configs(args.config)
    for cfg in configs:
        if args.seed is not None:
            cfg.seed = args.seed
        if args.f64:
            cfg.dtype = "float64"
        if args.data_dir is not None:
            cfg.data = {**cfg.data, "source": "cifar10", "dir": args.data_dir}
        cfg.validate()
    if len(configs) == 1 and args.out is None:
        res = run_experiment(configs[0], verbose=args.verbose)
        last = res.records[-1]
        print(f"{configs[0].name}: epochs={last.epoch} val_acc={last.val_acc:.4f} flops={last.flops:.4g}")
        return EXIT_OK
    if len(configs) == 1:
        configs[0].out_dir = configs[0].out_dir or args.out
    summary = run_many(configs, args.out or "runs")
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def _cmd_verify(args):
    import numpy as np

    from .verify import format_table, run_all

    dtypes = (np.float64,) if args.f64 else (np.float32, np.float64)
    results = run_all(trials=args.trials, seed=args.seed or 0, dtypes=dtypes)
    print(format_table(results))
    ok = all(r.passed for r in results)
    print("all suites passed" if ok else "SOME SUITES FAILED")
    return EXIT_OK if ok else EXIT_RUNTIME


def _cmd_flops(args):
    from .metrics import count_flops
    from .serialize import load_graph

    net = load_graph(args.checkpoint)
    fc = count_flops(net)
    for name, f in fc.layers.items():
        print(f"{name:>16}  {f:>14,d}")
    print(f"forward_flops_per_example     {fc.forward_flops_per_example}")
    print(f"train_step_flops_per_example  {fc.train_step_flops_per_example}")
    return EXIT_OK


def _cmd_export(args):
    from .metrics import export_filters
    from .serialize import load_graph

    net = load_graph(args.checkpoint)
    if args.node != "head" and args.node not in net:
        raise ConfigError(f"no node named {args.node!r}; nodes: {[nd.id for nd in net.nodes]}")
    out = args.out or f"filters_{args.node}"
    files = export_filters(net, args.node, out)
    print(f"wrote {len(files)} files to {out}")
    return EXIT_OK


def _cmd_build(args):
    import numpy as np

    from .arch import ArchSpec, build_arch
    from .serialize import save_graph

    try:
        spec = ArchSpec(args.family, args.width, not args.no_residual)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    net = build_arch(spec, seed=args.seed or 0, dtype=np.float64 if args.f64 else np.float32)
    out = args.out or f"{args.family}.json"
    save_graph(net, out)
    print(f"wrote {out} ({net.num_parameters()} parameters)")
    return EXIT_OK


COMMANDS = {"run": _cmd_run, "verify": _cmd_verify, "flops": _cmd_flops, "export-filters": _cmd_export,
            "build": _cmd_build}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (R2RError, OSError, ValueError, KeyError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
