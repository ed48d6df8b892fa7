"""Backend selection for the hot gather/scatter kernels.

The compiled extension is used when it imports; set
``DEEPFUZZY_KERNELS=python`` to force the numpy fallback.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("DEEPFUZZY_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def im2col(x, kh, kw, stride):
    return _impl.im2col(np.ascontiguousarray(x, dtype=np.float64), kh, kw, stride)


def col2im(cols, shape, kh, kw, stride):
    return _impl.col2im(
        np.ascontiguousarray(cols, dtype=np.float64), tuple(int(s) for s in shape), kh, kw, stride
    )
