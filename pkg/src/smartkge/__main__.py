import sys

from smartkge.cli import main

sys.exit(main())
