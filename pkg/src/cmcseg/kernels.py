"""Backend selection for the surface kernels.

The Cython extension is preferred; set ``CMCSEG_PURE_PYTHON=1`` to force the
numpy/scipy fallback.
"""

import os

from . import _surface_py

if os.environ.get("CMCSEG_PURE_PYTHON", "") not in ("", "0"):
    _impl = _surface_py
    BACKEND = "python"
else:
    try:
        from . import _surface as _impl  # type: ignore[attr-defined]
        BACKEND = "cython"
    except ImportError:
        _impl = _surface_py
        BACKEND = "python"

surface_mask = _impl.surface_mask
surface_distances = _impl.surface_distances
