"""Backend selection for the spatial kernels.

The compiled extension is used when it imports; set ``HARIS_PURE_PYTHON=1`` to
force the numpy fallback.  Both backends are bit-identical.
"""

import os

from haris import _pykernels

BACKEND = "python"
_impl = _pykernels

if not os.environ.get("HARIS_PURE_PYTHON"):
    try:
        from haris import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels

im2col3x3 = _impl.im2col3x3
col2im3x3 = _impl.col2im3x3
upsample2x = _impl.upsample2x
upsample2x_backward = _impl.upsample2x_backward
