import sys

from pets_lab.harness.cli import main

sys.exit(main())
