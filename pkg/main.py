import sys
import logging

from src.cli.commands import run

# Centralized logging configuration. Library modules only create named
# loggers, so basicConfig happens exactly once, here.
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
)


def main():
    try:
        code = run()
    except Exception:
        # Anything that escapes the subcommand handlers is a bug, not a
        # check failure: log the traceback and exit non-zero.
        logging.exception("Fatal error")
        sys.exit(1)
    sys.exit(code)


if __name__ == "__main__":
    main()
