"""Kernel backend selection.

The compiled module is used when it imports; otherwise the numpy versions.
``SNAPUNFOLD_KERNELS=python`` forces the fallback, ``=cython`` makes a
missing extension an error. The depthwise weight gradient always uses the
numpy version, which is faster than the compiled loop.
"""

import os

from . import _kernels_py

_choice = os.environ.get("SNAPUNFOLD_KERNELS", "").strip().lower()

if _choice == "python":
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        if _choice == "cython":
            raise
        _impl = _kernels_py

BACKEND = "python" if _impl is _kernels_py else "cython"

dw_forward = _impl.dw_forward
dw_backward_input = _impl.dw_backward_input
# the einsum reduction beats the compiled loop here (benchmarks/bench_kernels.py)
dw_backward_weight = _kernels_py.dw_backward_weight
tv_dual = _impl.tv_dual


def compiled():
    """Return the compiled kernel module, or None when it is not built."""
    try:
        from . import _kernels
    except ImportError:
        return None
    return _kernels
