import sys

from dpsgd.cli import main

sys.exit(main())
