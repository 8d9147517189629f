import sys

from glucose_iit.cli import main

sys.exit(main())
