"""Console entry point; all logic lives in :mod:`gradnoise.harness`."""

import sys

from .harness import run_cli


def main(argv=None):
    return run_cli(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
