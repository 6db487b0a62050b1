import sys

from mist.harness.cli import main

sys.exit(main())
