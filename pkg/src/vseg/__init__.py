"""Differentiable 3D volumetric segmentation toolkit.

SE-residual U-Nets over dense float64 tensors with exact reverse-mode
gradients, imbalance-aware segmentation losses with missing-annotation
masking, surface-distance metrics, synthetic head-and-neck phantoms, and a
two-phase training loop, all exercised at desk scale.
"""

import os as _os

# VSEG_THREADS caps the BLAS pools that back the conv/GEMM kernels. It must
# land in the environment before numpy initializes its threadpools, hence
# before any submodule import.
_cap = _os.environ.get("VSEG_THREADS")
if _cap:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _cap)
del _os, _cap

from .tensor import Tensor, no_grad  # noqa: E402

__version__ = "0.1.0"
__all__ = ["Tensor", "no_grad", "__version__"]
