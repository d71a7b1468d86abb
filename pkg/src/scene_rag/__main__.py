import sys

from scene_rag.cli import main

sys.exit(main())
