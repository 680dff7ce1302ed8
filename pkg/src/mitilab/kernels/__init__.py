"""Hot kernels with a compiled core and a pure-Python fallback.

The compiled ``_core`` extension is used when it imports cleanly. Setting
``MITILAB_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _fallback

BACKEND = "python"

if os.environ.get("MITILAB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _core as _impl

        BACKEND = "compiled"
    except ImportError:  # pragma: no cover - depends on the build
        _impl = _fallback
else:
    _impl = _fallback

linear_assignment = _impl.linear_assignment
min_composite_residual = _impl.min_composite_residual

__all__ = ["BACKEND", "linear_assignment", "min_composite_residual"]
