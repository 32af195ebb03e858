"""Backend switch for the hot kernels.

``IMPACTCAST_NUMBA`` selects the implementation:

* ``1`` -- numba-compiled kernels (fails loudly if numba is missing)
* ``0`` -- pure-numpy kernels
* unset / ``auto`` -- numba when importable, numpy otherwise
"""
from __future__ import annotations

import logging
import os

log = logging.getLogger(__name__)

try:
    import numba
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def decorator(func):
            return func

        return decorator


JIT_OPTIONS = dict(cache=True, nogil=True, fastmath=False, error_model="numpy")


def _resolve(flag: str | None) -> bool:
    flag = (flag or "auto").strip().lower()
    if flag in ("1", "true", "yes", "on", "numba"):
        if not NUMBA_AVAILABLE:
            raise RuntimeError("IMPACTCAST_NUMBA=1 but numba is not importable")
        return True
    if flag in ("0", "false", "no", "off", "numpy"):
        return False
    if flag != "auto":
        raise ValueError(f"unrecognised IMPACTCAST_NUMBA value {flag!r}")
    return NUMBA_AVAILABLE


_use_numba = _resolve(os.environ.get("IMPACTCAST_NUMBA"))


def use_numba() -> bool:
    return _use_numba


def set_backend(name: str) -> None:
    """Switch backend at runtime (``"numba"`` or ``"numpy"``)."""
    global _use_numba
    _use_numba = _resolve(name)
    log.debug("kernel backend -> %s", backend_name())


def backend_name() -> str:
    return "numba" if _use_numba else "numpy"
