import sys

from ldpo.cli import main

sys.exit(main())
