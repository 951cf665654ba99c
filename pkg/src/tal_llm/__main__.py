import sys

from tal_llm.cli import main

sys.exit(main())
