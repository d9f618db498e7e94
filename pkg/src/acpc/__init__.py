"""Aligned contrastive predictive coding on synthetic piecewise-constant sequences."""
import os

# the only environment knob: BLAS thread count, which must be set before numpy loads
_threads = os.environ.get("ACPC_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
