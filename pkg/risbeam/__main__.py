import sys

from risbeam.main import main

sys.exit(main())
