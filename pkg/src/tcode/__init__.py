"""Differentiable spatiotemporal neural fields with hashed time codes."""

import os

# TCODE_THREADS caps the worker pools of the numeric backends; it has to
# land in the environment before numpy or numba are first imported
_n = os.environ.get("TCODE_THREADS")
if _n:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS",
                 "NUMBA_NUM_THREADS"):
        os.environ.setdefault(_var, _n)

__version__ = "0.1.0"
