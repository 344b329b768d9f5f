import sys

from apseval.cli import main

sys.exit(main())
