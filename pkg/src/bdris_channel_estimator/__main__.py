"""Main entry point for ``python -m bdris_channel_estimator``."""

import sys

from .cli import main

if __name__ == "__main__":
    sys.exit(main())
