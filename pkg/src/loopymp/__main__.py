import sys

from loopymp.cli import main

sys.exit(main())
