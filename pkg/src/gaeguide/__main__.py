import sys

from gaeguide.cli import main

sys.exit(main())
