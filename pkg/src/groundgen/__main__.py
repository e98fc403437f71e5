import sys

from groundgen.cli import main

sys.exit(main())
