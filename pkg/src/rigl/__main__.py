import sys

from rigl.cli import main

sys.exit(main())
