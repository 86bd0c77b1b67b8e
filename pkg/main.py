import logging
import sys

from cli.app import run
from core.settings import LOG_FORMAT, load_settings


def main() -> int:
    settings = load_settings()
    logging.basicConfig(
        level=settings.log_level,
        format=LOG_FORMAT,
    )
    return run(sys.argv[1:], settings)


if __name__ == "__main__":
    sys.exit(main())
