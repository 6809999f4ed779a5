"""Continual self-supervised pre-training over mixed 1D/2D/3D data.

Sequential per-modality masked-modeling stages over a shared transformer
encoder, with a compact rehearsal buffer selected by k-means coverage,
feature-consistency replay against a frozen snapshot, and intra-modal
input mixing. Includes fine-tuning heads, evaluation metrics, synthetic
corpus generation, baseline training paradigms, and a CLI.
"""

__version__ = "0.1.0"

import os as _os

# COSS_THREADS caps every thread pool we might touch. The env vars must be
# in place before numpy (BLAS) and numba are imported, hence here.
_cap = _os.environ.get("COSS_THREADS", "").strip()
if _cap.isdigit() and int(_cap) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS", "NUMBA_NUM_THREADS"):
        _os.environ.setdefault(_var, _cap)
del _os, _cap

from .tensor import Parameter, Tensor, grad_of, no_grad  # noqa: F401
