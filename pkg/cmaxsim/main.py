"""cmaxsim command-line entry point.

    cmaxsim synth    --config exp.ini --out data/
    cmaxsim estimate --config exp.ini --mode all
    cmaxsim simulate --config exp.ini --no-baseline
    cmaxsim evaluate --config exp.ini

Precedence: model defaults < INI file < flags. Exit codes: 0 success,
1 usage or configuration error, 2 data error.
"""
from __future__ import annotations

import argparse
import sys
from typing import Any, Dict, List, NoReturn, Optional

from cmaxsim import __version__
from cmaxsim.cli.commands import COMMANDS
from cmaxsim.core.config import load_run_config, settings
from cmaxsim.core.errors import CmaxError, ConfigError, DataError
from cmaxsim.core.logging import get_logger, setup_logging

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2

logger = get_logger("main")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="cmaxsim", description="Rotational CMAX estimation and engine datapath simulation")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment file")
    common.add_argument("--out", help="output directory ([output] dir)")
    common.add_argument("--seed", type=int, help="random seed ([run] seed)")
    common.add_argument("--mode", choices=["full", "fixed", "adaptive", "all"], help="[run] mode")
    common.add_argument("--tau", help="three comma-separated stage thresholds ([schedule] tau)")
    common.add_argument("--windows", type=int, help="process at most this many windows")
    common.add_argument("--engine", action=argparse.BooleanOptionalAction, default=None,
                        help="simulate the engine design")
    common.add_argument("--baseline", action=argparse.BooleanOptionalAction, default=None,
                        help="simulate the baseline design")
    common.add_argument("--log-level", help="overrides CMAXSIM_LOG_LEVEL")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=(fn.__doc__ or "").splitlines()[0])
    return ap


def overrides_from(args: argparse.Namespace) -> Dict[str, Dict[str, Any]]:
    return {
        "run": {"seed": args.seed, "mode": args.mode},
        "schedule": {"tau": args.tau},
        "window": {"max_windows": args.windows},
        "engine": {"engine": args.engine, "baseline": args.baseline},
        "output": {"dir": args.out},
    }


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level or settings.log_level, settings.log_format, settings.log_file)
    try:
        cfg = load_run_config(args.config, overrides_from(args))
        written = COMMANDS[args.command](cfg)
    except ConfigError as e:
        logger.error("configuration error: %s", e)
        return EXIT_CONFIG
    except DataError as e:
        logger.error("data error: %s", e)
        return EXIT_DATA
    except CmaxError as e:
        # numerical, kernel, engine and trace failures are data-dependent
        logger.error("%s: %s", type(e).__name__, e)
        return EXIT_DATA
    logger.info("%s wrote %d files", args.command, len(written))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
