import sys

from fedmesh.cli import main

sys.exit(main())
