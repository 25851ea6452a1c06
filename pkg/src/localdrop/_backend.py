"""Kernel backend selection.

The compiled extension is used when it imports cleanly; otherwise the numpy
fallback is used. Set ``LOCALDROP_BACKEND=python`` to force the fallback.
"""
import os

from . import _pykernels

kernels = _pykernels
if os.environ.get("LOCALDROP_BACKEND", "").lower() != "python":
    try:
        from . import _kernels as kernels  # noqa: F811
    except ImportError:
        kernels = _pykernels

BACKEND = kernels.BACKEND


def get_kernels(name=None):
    """Return the kernel module by name ("cython" or "python"), or the active one."""
    if name is None:
        return kernels
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown backend {name!r}")
