"""
Command line: `riskforge <stage> --config run.ini [--out DIR] [--seed N]`.

`all` runs every stage in order; `validate` prints the normalized config.
Exit status 0 on success, 2 when a riskforge error or a bad value was reported.
"""
import argparse
import sys

from riskforge.lib.config import echo_config, validate_config
from riskforge.lib.errors import RiskforgeError
from riskforge.lib.logger import log_error, log_info, setup_logging
from riskforge.pipeline import STAGES, run_all, run_stage

MODULE = "cli"

EXIT_OK = 0
EXIT_ERROR = 2
COMMANDS = STAGES + ("all", "validate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="riskforge",
                                     description="Interpretable multimodal ICU mortality risk pipeline")
    parser.add_argument("command", choices=COMMANDS, help="pipeline stage, 'all' or 'validate'")
    parser.add_argument("--config", default=None, help="INI run configuration (defaults apply without one)")
    parser.add_argument("--out", default=None, help="run directory, overrides paths.out_dir")
    parser.add_argument("--seed", type=int, default=None, help="root seed, overrides run.seed")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = validate_config(args.config, seed=args.seed, out_dir=args.out)
        setup_logging(str(cfg.log_dir))
        if args.command == "validate":
            sys.stdout.write(echo_config(cfg))
            return EXIT_OK
        log_info(MODULE, f"{args.command}: run directory {cfg.paths.out_dir}, seed {cfg.seed}")
        if args.command == "all":
            run_all(cfg)
        else:
            run_stage(args.command, cfg)
    except RiskforgeError as e:
        log_error(MODULE, f"{type(e).__name__}: {e}")
        return EXIT_ERROR
    except ValueError as e:
        log_error(MODULE, f"{args.command} failed: {e}", exc_info=True)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
