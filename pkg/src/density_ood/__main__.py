"""Allow ``python -m density_ood``."""

import sys

from density_ood.cli import main

if __name__ == "__main__":
    sys.exit(main())
