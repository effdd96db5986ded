import argparse
import logging
import sys
from typing import List, Optional

from pydantic import ValidationError

from app.cli import fitting, reporting, validation
from app.core.config import settings
from app.core.exceptions import EXIT_USAGE, ModelingError, SamplerError
from app.models.schemas import ErrorResponse


logger = logging.getLogger(__name__)


def configure_logging(verbose: bool = False) -> None:
    level = logging.DEBUG if (verbose or settings.debug) else getattr(logging, settings.log_level.upper(), logging.INFO)
    logging.basicConfig(
        level=level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[
            logging.StreamHandler(sys.stdout),
        ],
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stcar",
        description=f"{settings.app_name}: hierarchical Poisson CAR models of section-year counts",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {settings.app_version}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    subparsers = parser.add_subparsers(dest="command", required=True)
    fitting.register(subparsers)
    validation.register(subparsers)
    reporting.register(subparsers)
    return parser


def _report_error(error: str, detail: Optional[str], exit_code: int) -> int:
    response = ErrorResponse(error=error, detail=detail, exit_code=exit_code)
    print(response.model_dump_json(), file=sys.stderr)
    return exit_code


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    configure_logging(args.verbose)
    logger.debug(f"Running command {args.command}")
    try:
        return int(args.handler(args))
    except SamplerError as e:
        logger.error(f"Sampler failure after {len(e.completed)} completed chain(s): {e}")
        return _report_error("Sampler failure", str(e), e.exit_code)
    except ModelingError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return _report_error(type(e).__name__, str(e), e.exit_code)
    except ValidationError as e:
        return _report_error("Invalid configuration", str(e), EXIT_USAGE)
    except Exception as e:
        logger.error(f"Unhandled exception: {e}", exc_info=True)
        return _report_error("Internal error", str(e) if settings.debug else "An unexpected error occurred", 1)


if __name__ == "__main__":
    sys.exit(main())
