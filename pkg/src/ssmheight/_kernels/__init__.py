"""Selective-scan kernel selection.

The compiled extension is used when it imports; otherwise the numpy twin is
used.  Setting ``SSMHEIGHT_PURE_PYTHON=1`` forces the numpy path.
"""

from __future__ import annotations

import os

from . import _scan_py

BACKEND = "python"
if os.environ.get("SSMHEIGHT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _scan as _compiled  # type: ignore[attr-defined]
    except ImportError:  # extension not built
        _compiled = None
    else:
        BACKEND = "cython"
else:
    _compiled = None

python_backend = _scan_py
compiled_backend = _compiled
active = _compiled if _compiled is not None else _scan_py

scan_forward = active.scan_forward
scan_backward = active.scan_backward

__all__ = ["BACKEND", "scan_forward", "scan_backward", "python_backend", "compiled_backend"]
