import argparse
import logging
import os
import sys

import config
from errors import ConfigurationError
from handlers import command_handlers
from run_config import apply_overrides, parse_config

# Enable logging
logging.basicConfig(
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    level=getattr(logging, config.LOG_LEVEL.upper(), logging.INFO)
)
logger = logging.getLogger(__name__)

COMMANDS = {
    "run-det": ("det", command_handlers.run_det_command, "adaptive deterministic run with the mean viscosity"),
    "run-sg": ("sg", command_handlers.run_sg_command, "stochastic Galerkin run"),
    "run-mc": ("mc", command_handlers.run_mc_command, "Monte Carlo ensemble"),
    "run-sc": ("sc", command_handlers.run_sc_command, "sparse-grid stochastic collocation"),
    "report": (None, command_handlers.report_command, "compare probe statistics of finished runs"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgns", description="Stochastic Galerkin Navier-Stokes solver suite")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, (_, _, help_text) in COMMANDS.items():
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("--config", help="JSON run configuration")
        sub.add_argument("--out", help="output directory")
        sub.add_argument("--seed", type=int, help="random seed")
        sub.add_argument("--threads", type=int, help="worker threads for sampling")
        sub.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="logging level")
        if name == "report":
            for method in command_handlers.REPORT_METHODS:
                sub.add_argument(f"--{method}", metavar="DIR", help=f"directory of a finished {method} run")
    return parser


def _attach_run_log(directory: str):
    """Mirror the log into <directory>/run.log, replacing the file handler of an earlier run."""
    root = logging.getLogger()
    for old in [h for h in root.handlers if getattr(h, "run_log", False)]:
        root.removeHandler(old)
        old.close()
    os.makedirs(directory, exist_ok=True)
    handler = logging.FileHandler(os.path.join(directory, "run.log"), mode="w")
    handler.setFormatter(logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s'))
    handler.run_log = True
    root.addHandler(handler)


def main(argv=None) -> int:
    """Parses the command line, layers the configuration and dispatches the subcommand."""
    args = build_parser().parse_args(argv)
    if args.log_level:
        logging.getLogger().setLevel(args.log_level)
    mode, handler, _ = COMMANDS[args.command]

    try:
        cfg = parse_config(args.config)
        cfg = apply_overrides(cfg, mode=mode, out=args.out, seed=args.seed, threads=args.threads)
    except ConfigurationError as e:
        logger.error(f"Invalid configuration: {e}")
        print(f"❌ Invalid configuration: {e}")
        return 2

    _attach_run_log(cfg.output.directory)
    logger.info(f"Starting {args.command} (output: {cfg.output.directory})")
    context = {"config": cfg, "command": args.command}
    if args.command == "report":
        context["inputs"] = {m: getattr(args, m) for m in command_handlers.REPORT_METHODS}
    return handler(context)


if __name__ == '__main__':
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\n🛑 Run stopped by user")
        sys.exit(130)
    except Exception as e:
        logger.critical(f"Failed to run: {e}")
        print(f"❌ Critical Error: {e}")
        sys.exit(1)
