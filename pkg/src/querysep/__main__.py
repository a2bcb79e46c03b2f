"""Module entry point: python -m querysep ..."""

import sys

from .cli import main

sys.exit(main())
