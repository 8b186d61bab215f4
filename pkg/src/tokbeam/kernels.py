"""Kernel backend selection.

The compiled extension ``_ckernels`` is used when it was built; otherwise
the numpy fallback in ``_pykernels``. Set ``TOKBEAM_KERNELS=python`` to
force the fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("TOKBEAM_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        pass

utilities_batch = _impl.utilities_batch
wmmse = _impl.wmmse
maxmin_pga = _impl.maxmin_pga


def get(name: str):
    """Kernel module by name, for parity tests and benchmarks."""
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")
