"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports and ``CERTPRUNE_DISABLE_JIT`` is
unset (or "0").  Set ``CERTPRUNE_DISABLE_JIT=1`` to force the numpy path;
both are importable directly as ``kernels.numpy_impl`` / ``kernels.jit_impl``.
"""

import os

from . import _numpy as numpy_impl

try:
    from . import _jit as jit_impl
except ImportError:  # numba missing
    jit_impl = None

JIT_ENABLED = jit_impl is not None and os.environ.get("CERTPRUNE_DISABLE_JIT", "0") in ("", "0")

_impl = jit_impl if JIT_ENABLED else numpy_impl

interval_affine = _impl.interval_affine
relu_phase_bounds = _impl.relu_phase_bounds
crown_relu_backward = _impl.crown_relu_backward
box_min = _impl.box_min
branch_scores = _impl.branch_scores
im2col = _impl.im2col
col2im = _impl.col2im

__all__ = [
    "JIT_ENABLED",
    "box_min",
    "branch_scores",
    "col2im",
    "crown_relu_backward",
    "im2col",
    "interval_affine",
    "jit_impl",
    "numpy_impl",
    "relu_phase_bounds",
]
