"""Sparse-view dynamic Gaussian splatting with separate foreground and background representations."""

import os as _os

# The system TBB is older than numba wants; the OpenMP/workqueue layers are fine and quiet.
_os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

__version__ = "0.1.0"
