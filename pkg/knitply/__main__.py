import sys

from knitply.main import main

sys.exit(main())
