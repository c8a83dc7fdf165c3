"""Hot loops for conv2d / maxpool2d.

The compiled ``_ckernels`` extension is used when it has been built; otherwise
the numpy implementations in ``_pykernels`` are used. Set ``FREEADV_PURE=1``
to force the fallback. Both paths produce bit-identical output.
"""

import os

from . import _pykernels

BACKEND = "python"

if os.environ.get("FREEADV_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
else:
    _impl = _pykernels

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward

__all__ = ["BACKEND", "im2col", "col2im", "maxpool_forward", "maxpool_backward"]
