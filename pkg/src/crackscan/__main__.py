import sys

from crackscan.cli import main

sys.exit(main())
