"""Command-line entry point: ``causalpo <subcommand> [options]``."""
import argparse
import sys

from . import acceptance
from . import experiment as ex
from .config import default_config_path, load_config
from .errors import CausalPOError


def _common(p):
    p.add_argument("--config", default=None, help="experiment YAML (default: the shipped desk benchmark)")
    p.add_argument("--out-dir", default="runs/default", help="directory for all artifacts")
    p.add_argument("--seed", type=int, default=None, help="override the master seed")
    p.add_argument("--threads", type=int, default=1, help="worker threads for Monte Carlo replicates")


def build_parser():
    parser = argparse.ArgumentParser(prog="causalpo", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw the randomized datasets and their confounded copy")
    _common(p)

    p = sub.add_parser("fit-outcome", help="fit the clean and confounded outcome models and P-hat^R")
    _common(p)

    p = sub.add_parser("train", help="fit FT, then train one objective from it")
    _common(p)
    p.add_argument("--method", required=True, choices=ex.METHODS)
    p.add_argument("--variant", default="clean", choices=ex.VARIANTS,
                   help="clean or confounded outcome model; reseed for a second CPO run")
    p.add_argument("--auto-build", action="store_true", help="run simulate and fit-outcome first if needed")

    p = sub.add_parser("evaluate", help="win rates, reward table and confounding impact for trained arms")
    _common(p)
    p.add_argument("--plot", action="store_true", help="also write x,y CSVs for plotting")

    p = sub.add_parser("reproduce-all", help="run the whole pipeline and the acceptance suite")
    _common(p)
    p.add_argument("--plot", action="store_true", help="also write x,y CSVs for plotting")
    p.add_argument("--skip-determinism", action="store_true",
                   help="skip the second run that checks byte-identical outputs")
    return parser


def _print_table(ws, name):
    path = ws.path(f"results/{name}.txt")
    try:
        with open(path) as fh:
            print(f"\n{name}:\n{fh.read()}", end="")
    except OSError:
        pass


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config or default_config_path(), args.seed)
        if args.threads < 1:
            raise ValueError("--threads must be >= 1")
        if args.command == "simulate":
            ws = ex.simulate(cfg, args.out_dir)
            print(f"datasets written to {ws.out_dir}")
        elif args.command == "fit-outcome":
            ws = ex.fit_outcome(cfg, args.out_dir)
            print(f"outcome models written to {ws.out_dir}/models")
        elif args.command == "train":
            arm = ex.arm_name(args.method, args.variant)
            _, trace = ex.train_arm(cfg, args.out_dir, args.method, args.variant, args.auto_build)
            msg = f"trained {arm}"
            if trace:
                msg += f": final estimate {trace[-1].estimate:.4f}, true value {trace[-1].true_value:.4f}"
            print(msg)
        elif args.command == "evaluate":
            ex.evaluate(cfg, args.out_dir, args.plot)
            ws = ex.Workspace(cfg, args.out_dir)
            for name in ("win_rates", "reward_table", "confounding_impact"):
                _print_table(ws, name)
        elif args.command == "reproduce-all":
            res = acceptance.reproduce_all(
                cfg, args.out_dir, args.threads, args.plot, not args.skip_determinism,
                log=lambda msg: print(msg, file=sys.stderr),
            )
            for step, msg in res.failures:
                print(f"STEP FAILED {step}: {msg}")
            for c in res.criteria:
                print(f"{c.status} criterion {c.number}: {c.title} ({c.elapsed:.1f} s)")
            print(f"report: {res.report_path}")
            return 0 if res.passed else 1
    except (CausalPOError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
