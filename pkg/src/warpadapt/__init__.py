"""Adapting a frozen convolutional segmentation model to fisheye
distortion by training only the sampling offsets of its convolutions
(and optionally the batch-norm parameters)."""

import os as _os

# Cap BLAS worker threads before numpy first loads anywhere in the
# package; existing explicit settings win over the cap.
_threads = _os.environ.get("WARPADAPT_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
