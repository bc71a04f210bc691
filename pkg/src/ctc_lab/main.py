"""
Entry point for the ``ctc-lab`` command.
"""
import sys
from typing import List, Optional

import structlog
from pydantic import ValidationError

from .cli import build_parser
from .core.config import get_settings
from .core.errors import CtcLabError
from .core.logs import configure_logging

logger = structlog.get_logger(__name__)


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run one command and map failures to exit codes.

    Returns:
        0 on success, 1 on runtime failures, 2 on usage, parse and
        validation failures.
    """
    settings = get_settings()
    configure_logging(settings.log_level, settings.log_json)
    args = build_parser().parse_args(argv)
    logger.debug("Command started", command=args.command, service=settings.service_name)
    try:
        return args.handler(args)
    except CtcLabError as e:
        logger.error("Command failed", command=args.command, error=str(e), error_type=type(e).__name__)
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except ValidationError as e:
        logger.error("Invalid configuration", command=args.command, error=str(e))
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        logger.exception("Unexpected failure", command=args.command, error=str(e))
        return 1


if __name__ == "__main__":
    sys.exit(main())
