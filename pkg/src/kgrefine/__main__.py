import sys

from kgrefine.cli import main

sys.exit(main())
