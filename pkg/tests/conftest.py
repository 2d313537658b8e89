"""Suite-wide setup: pin the numeric libraries to one thread.

The acceptance runtime budgets are stated for single-threaded execution;
setting the knobs here (before numpy/scipy load) makes the measured wall
times a faithful single-thread bound and keeps timings reproducible.
"""

import os

for _var in (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "BLIS_NUM_THREADS",
):
    os.environ.setdefault(_var, "1")
