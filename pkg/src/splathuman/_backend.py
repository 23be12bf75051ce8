"""Kernel backend selection.

The compiled ``_core`` extension is used when it imports; otherwise the
numpy twin in ``_core_py``. Set ``SPLATHUMAN_BACKEND=python`` to force the
fallback (``cython`` makes a missing extension an error).
"""
import os

from . import _core_py

_requested = os.environ.get("SPLATHUMAN_BACKEND", "").lower()

if _requested == "python":
    core = _core_py
else:
    try:
        from . import _core as core
    except ImportError:
        if _requested == "cython":
            raise
        core = _core_py

BACKEND = "python" if core is _core_py else "cython"


def get_core(name=None):
    """Return the kernel module by name, or the active one when ``name`` is None."""
    if name is None:
        return core
    if name == "python":
        return _core_py
    if name == "cython":
        from . import _core
        return _core
    raise ValueError(f"unknown backend {name!r}")
