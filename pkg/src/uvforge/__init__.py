"""uvforge: learned UV parameterization with semantic parts and seam placement
steered toward occluded regions."""

import os

# The TBB layer shipped in some images is too old for numba and warns on every
# parallel launch; the workqueue layer needs nothing external.
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

__version__ = "0.1.0"
