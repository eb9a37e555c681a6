import sys

from inflrobust.cli import main

sys.exit(main())
