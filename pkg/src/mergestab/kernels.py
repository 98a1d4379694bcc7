"""Backend selection for the SGD inner loops.

The compiled extension is used when importable; set ``MERGESTAB_BACKEND=python``
to force the numpy fallback.
"""
import os

from . import _pykernels

_impl = _pykernels
if os.environ.get("MERGESTAB_BACKEND", "").lower() != "python":
    try:
        from . import _ckernels as _impl  # noqa: F811
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND = _impl.BACKEND

sq_dist = _impl.sq_dist
sgd_least_squares = _impl.sgd_least_squares
sgd_mlp = _impl.sgd_mlp


def get_backend(name: str):
    """Return the kernel module for ``"python"`` or ``"cython"`` explicitly."""
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown backend {name!r}")
