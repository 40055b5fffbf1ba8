"""Kernel backend selection.

The compiled extension ``amtml._ext`` is used when it imports cleanly.
Set ``AMTML_KERNELS=python`` to force the numpy fallback (useful for
benchmarking and for checking that both backends agree).
"""
import logging
import os

from amtml import _kernels_py

logger = logging.getLogger(__name__)

_FORCE = os.environ.get("AMTML_KERNELS", "").lower()

if _FORCE == "python":
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from amtml import _ext as _impl
        BACKEND = "cython"
    except ImportError:
        if _FORCE == "cython":
            raise
        logger.debug("compiled kernels unavailable, using numpy fallback")
        _impl = _kernels_py
        BACKEND = "python"

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
max_pool_argmax = _impl.max_pool_argmax
max_pool_backward = _impl.max_pool_backward
angle_huber = _impl.angle_huber

__all__ = [
    "BACKEND",
    "angle_huber",
    "conv2d_backward",
    "conv2d_forward",
    "max_pool_argmax",
    "max_pool_backward",
]
