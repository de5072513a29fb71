import sys

from windowquant.cli import main

sys.exit(main())
