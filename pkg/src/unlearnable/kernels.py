"""Backend selection for the hot convolution / pooling kernels.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``UNLEARNABLE_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _kernels_py

_compiled = None
if os.environ.get("UNLEARNABLE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _kernels_py

conv_output_size = _kernels_py.conv_output_size


def im2col(x, kh, kw, stride, pad):
    return _impl.im2col(np.ascontiguousarray(x, dtype=np.float64), kh, kw, stride, pad)


def col2im(cols, x_shape, kh, kw, stride, pad):
    return _impl.col2im(np.ascontiguousarray(cols, dtype=np.float64), tuple(int(s) for s in x_shape),
                        kh, kw, stride, pad)


def maxpool2d_forward(x, k, stride):
    return _impl.maxpool2d_forward(np.ascontiguousarray(x, dtype=np.float64), k, stride)


def maxpool2d_backward(grad_out, arg, x_shape, k, stride):
    return _impl.maxpool2d_backward(np.ascontiguousarray(grad_out, dtype=np.float64),
                                    np.ascontiguousarray(arg, dtype=np.int64),
                                    tuple(int(s) for s in x_shape), k, stride)
