import sys

from metacog_rl.harness.cli import main

sys.exit(main())
