import sys

from wvsched.cli import main

sys.exit(main())
