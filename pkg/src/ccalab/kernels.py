"""Kernel selection: compiled Cython core when importable, numpy otherwise.

Set ``CCALAB_PURE_PYTHON=1`` to force the numpy fallback.
"""
import os

from . import _pykernels

python_impl = _pykernels
compiled_impl = None

if os.environ.get("CCALAB_PURE_PYTHON") != "1":
    try:
        from . import _ckernels as compiled_impl
    except ImportError:  # extension not built
        compiled_impl = None

impl = compiled_impl if compiled_impl is not None else python_impl
BACKEND = "cython" if impl is compiled_impl else "python"


def get_impl(backend: str | None = None):
    """Return the kernel module for ``backend`` ('cython', 'python', or None for the default)."""
    if backend is None:
        return impl
    if backend == "python":
        return python_impl
    if backend == "cython":
        if compiled_impl is None:
            raise ImportError("compiled kernels are not available; build with `pip install -e .`")
        return compiled_impl
    raise ValueError(f"unknown backend {backend!r}")
