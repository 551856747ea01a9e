"""Run the command line with ``python -m alignformer``."""

import sys

from .cli import main

sys.exit(main())
