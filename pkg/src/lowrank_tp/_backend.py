"""Kernel backend selection.

The compiled extension is preferred; the numpy fallback is used when it is
missing or when the environment variable ``LOWRANK_TP_PURE`` is set to a
non-empty value other than ``0``.
"""

import os

from . import _fallback

_force_pure = os.environ.get("LOWRANK_TP_PURE", "") not in ("", "0")

kernels = _fallback
BACKEND = "python"

if not _force_pure:
    try:
        from . import _kernels as kernels  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        pass


def available_backends():
    """Map of backend name to kernel module for every importable backend."""
    found = {"python": _fallback}
    try:
        from . import _kernels
        found["cython"] = _kernels
    except ImportError:
        pass
    return found
