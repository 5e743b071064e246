"""``python -m voxcodesign run ...`` / ``python -m voxcodesign report RUN_DIR``.

Precedence: command-line flags over ``--config`` file values over defaults.
"""
import argparse
import sys

from . import runner


def _parser():
    p = argparse.ArgumentParser(prog="voxcodesign", description="Soft-robot pretraining and co-design runs.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="execute one pipeline into a new run directory")
    r.add_argument("--config", help="flat 'key = value' config file")
    for name, kind, default in runner.config_fields():
        flag = "--" + name.replace("_", "-")
        caster = int if "int" in str(kind) else str
        r.add_argument(flag, dest=name, type=caster, default=None, help=f"default: {default}")
    rep = sub.add_parser("report", help="summarize a finished run directory")
    rep.add_argument("run_dir")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "report":
        try:
            print(runner.report(args.run_dir), end="")
        except runner.IncompleteRunError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return runner.EXIT_INCOMPLETE
        return runner.EXIT_OK
    try:
        values = runner.parse_config_text(open(args.config).read()) if args.config else {}
        values.update({k: v for k, v in vars(args).items()
                       if k not in ("command", "config") and v is not None})
        outcome = runner.run(runner.RunConfig(**values))
    except (runner.ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return runner.EXIT_VALIDATION
    print(runner.report(outcome.run_dir), end="")
    print(outcome.run_dir)
    return outcome.exit_code


if __name__ == "__main__":
    sys.exit(main())
