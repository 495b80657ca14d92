import sys

from malstone.cli import main

sys.exit(main())
