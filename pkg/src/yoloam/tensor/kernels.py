"""Kernel backend selection.

The compiled module is used when it imports; ``YOLOAM_KERNELS=python`` forces
the numpy fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("YOLOAM_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "compiled"


def use(backend: str) -> None:
    """Switch backend at runtime ("python" or "compiled")."""
    global _impl, BACKEND
    if backend == "python":
        _impl, BACKEND = _kernels_py, "python"
    elif backend == "compiled":
        from . import _kernels as _compiled

        _impl, BACKEND = _compiled, "compiled"
    else:
        raise ValueError(f"unknown kernel backend {backend!r}")


def im2col(xp, kh, kw, sh, sw, oh, ow):
    return _impl.im2col(xp, kh, kw, sh, sw, oh, ow)


def col2im(cols, c, hp, wp, kh, kw, sh, sw, oh, ow):
    return _impl.col2im(cols, c, hp, wp, kh, kw, sh, sw, oh, ow)


def maxpool_forward(xp, k, s, oh, ow):
    return _impl.maxpool_forward(xp, k, s, oh, ow)


def maxpool_backward(g, arg, hp, wp, k, s):
    return _impl.maxpool_backward(g, arg, hp, wp, k, s)
