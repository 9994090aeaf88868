import sys

from snspdpnr.cli import main

sys.exit(main())
