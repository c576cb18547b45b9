import sys

from divfree.cli import main

sys.exit(main())
