"""Windowed convolution kernels with a compiled core and a numpy fallback.

The compiled extension is used when it was built and ``PDRCAPS_PURE_PYTHON``
is unset (or ``0``).  ``BACKEND`` names the active implementation.
"""
import os

from . import _pykernels as python_backend

compiled_backend = None
if os.environ.get("PDRCAPS_PURE_PYTHON", "0") in ("", "0"):
    try:
        from . import _ckernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

_impl = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "compiled" if compiled_backend is not None else "python"

im2col = _impl.im2col
col2im = _impl.col2im
depthwise_forward = _impl.depthwise_forward
depthwise_backward = _impl.depthwise_backward

__all__ = ["BACKEND", "im2col", "col2im", "depthwise_forward", "depthwise_backward",
           "python_backend", "compiled_backend"]
