import sys

from omc.cli import main

sys.exit(main())
