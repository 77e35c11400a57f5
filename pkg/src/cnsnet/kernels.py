"""Kernel backend selection.

The compiled Cython extension is preferred.  Setting the environment
variable ``CNSNET_PURE_PYTHON=1`` before import, or failing to build the
extension, selects the numpy implementations instead.  ``BACKEND`` names
the active choice; ``get_backend(name)`` returns either module explicitly
(used by the tests and the benchmark to compare the two).
"""

import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_FORCE_PURE = os.environ.get("CNSNET_PURE_PYTHON", "").strip() not in ("", "0")

if _ckernels is not None and not _FORCE_PURE:
    _impl = _ckernels
    BACKEND = "cython"
else:
    _impl = _pykernels
    BACKEND = "python"


def available_backends():
    return ["python"] + (["cython"] if _ckernels is not None else [])


def get_backend(name):
    if name == "python":
        return _pykernels
    if name == "cython":
        if _ckernels is None:
            raise ImportError("compiled kernels are not built")
        return _ckernels
    raise ValueError(f"unknown backend {name!r}")


def _c(a):
    return np.ascontiguousarray(a)


def im2col(x, kh, kw, stride, pad):
    return _impl.im2col(_c(x), kh, kw, stride, pad)


def col2im(cols, x_shape, kh, kw, stride, pad):
    return _impl.col2im(_c(cols), tuple(int(s) for s in x_shape), kh, kw, stride, pad)


def maxpool_forward(x, k, stride):
    return _impl.maxpool_forward(_c(x), k, stride)


def maxpool_backward(dout, arg, x_shape):
    return _impl.maxpool_backward(_c(dout), _c(arg), tuple(int(s) for s in x_shape))


def softmax_rows(logits):
    return _impl.softmax_rows(_c(logits))
