"""Kernel dispatch: compiled extension when built, numpy fallback otherwise.

Set ``EDGEKIT_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

from . import _kernels_py as py

if os.environ.get("EDGEKIT_PURE_PYTHON", "") not in ("", "0"):
    _impl = py
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = py
        BACKEND = "python"

cle_decode = _impl.cle_decode
topk_indices = _impl.topk_indices
find_cycle = py.find_cycle
