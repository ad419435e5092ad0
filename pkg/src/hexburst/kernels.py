"""Kernel dispatch: the compiled extension when it imports, else numpy.

Set ``HEXBURST_PURE_PYTHON=1`` to force the numpy fallback.
"""

import os

if os.environ.get("HEXBURST_PURE_PYTHON", "") not in ("", "0"):
    from . import _kernels_py as _impl
else:
    try:
        from . import _kernels as _impl
    except ImportError:  # extension not built
        from . import _kernels_py as _impl

IMPL = _impl.IMPL
warp_forward = _impl.warp_forward
warp_backward = _impl.warp_backward
block_match = _impl.block_match
candidate_order = _impl.candidate_order
im2col = _impl.im2col
col2im = _impl.col2im
