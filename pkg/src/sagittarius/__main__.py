import sys

from sagittarius.cli import main

sys.exit(main())
