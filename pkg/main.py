"""Command-line entry point."""

import logging
import sys

from coopsubnet.cli import EXIT_CONFIGURATION, main
from coopsubnet.config import ConfigurationError, Settings

try:
    settings = Settings.from_env()
except ConfigurationError as exc:
    sys.stderr.write(f"error: {exc}\n")
    raise SystemExit(EXIT_CONFIGURATION) from exc

logging.basicConfig(
    level=settings.log_level,
    format="%(asctime)s %(levelname)s %(name)s %(message)s",
)


if __name__ == "__main__":
    raise SystemExit(main(settings=settings))
