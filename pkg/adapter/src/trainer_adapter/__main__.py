import sys

from trainer_adapter.serve import main

sys.exit(main())
