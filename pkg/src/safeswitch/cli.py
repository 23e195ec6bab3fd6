"""Command-line entry point: ``safeswitch {certify,simulate,sweep,verify}``."""

import argparse
import sys

from .config import DESK_TRAJ, PAPER_TRAJ, load_config
from .errors import SafeSwitchError
from .experiments import cmd_certify, cmd_simulate, cmd_sweep, cmd_verify

COMMANDS = {
    "certify": cmd_certify,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "verify": cmd_verify,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="safeswitch", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="YAML experiment configuration")
    parser.add_argument("--seed", type=int, help="override simulation.seed")
    parser.add_argument("--out", help="override output.dir")
    parser.add_argument("--scale", choices=("desk", "paper"),
                        help="trajectory count: desk=10^4, paper=10^5")
    parser.add_argument("--workers", type=int, help="override simulation.workers")
    parser.add_argument("--no-timestamp", action="store_true",
                        help="omit the timestamp header line from outputs")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    overrides = {}
    if args.seed is not None:
        overrides["simulation.seed"] = args.seed
    if args.out is not None:
        overrides["output.dir"] = args.out
    if args.scale is not None:
        overrides["simulation.n_traj"] = PAPER_TRAJ if args.scale == "paper" else DESK_TRAJ
    if args.workers is not None:
        overrides["simulation.workers"] = args.workers
    if args.no_timestamp:
        overrides["output.timestamp"] = False
    try:
        cfg = load_config(args.config, overrides=overrides)
        result = COMMANDS[args.command](cfg)
    except (SafeSwitchError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.command == "certify":
        print(result.as_text(), end="")
    elif args.command == "simulate":
        for k, v in result[0].items():
            print(f"{k} = {v}")
    elif args.command == "sweep":
        print(result.to_csv(), end="")
    else:
        print(result.to_csv(), end="")
        return 0 if result.passed else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
