"""Backend selection for the conv2d inner loop.

The compiled extension is used when it was built and importable; otherwise the
numpy fallback. Set ``POLYFORMER_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
im2col = _kernels_py.im2col
col2im = _kernels_py.col2im

if os.environ.get("POLYFORMER_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        im2col = _compiled.im2col
        col2im = _compiled.col2im
        BACKEND = "cython"
