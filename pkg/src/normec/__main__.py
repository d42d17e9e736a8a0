import sys

from normec.cli import main

sys.exit(main())
