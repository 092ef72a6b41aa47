import sys

from dmasim.harness import main

sys.exit(main())
