import sys

from drvae.cli import main

sys.exit(main())
