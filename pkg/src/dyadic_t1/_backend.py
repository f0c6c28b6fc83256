"""Selects the compiled core or the numpy fallback at import time.

Set ``DYADIC_T1_PURE=1`` to force the fallback.
"""
import os

if os.environ.get("DYADIC_T1_PURE", "") not in ("", "0"):
    from . import _pycore as core
    BACKEND = "python"
else:
    try:
        from . import _core as core
        BACKEND = "cython"
    except ImportError:
        from . import _pycore as core
        BACKEND = "python"

__all__ = ["core", "BACKEND"]
