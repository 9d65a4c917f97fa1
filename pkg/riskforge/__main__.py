import sys

from riskforge.cli import main

sys.exit(main())
