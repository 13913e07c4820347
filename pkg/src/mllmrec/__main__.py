import sys

from mllmrec.cli import main

sys.exit(main())
