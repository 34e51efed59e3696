"""Kernel backend selection.

The compiled Cython extension is preferred when it imports cleanly;
otherwise the numpy implementations take over. Both expose an identical
surface (gelu/softmax/log-softmax/layer-norm forward+backward and the
fused Adam update), so callers never know which one they got.

`use_backend()` exists for tests and the kernel benchmark; normal code
should rely on the import-time choice.
"""

from . import numpy_backend

try:
    from . import _fastops as _compiled
except ImportError:
    _compiled = None

active = _compiled if _compiled is not None else numpy_backend


def available_backends():
    names = ["numpy"]
    if _compiled is not None:
        names.append("compiled")
    return names


def get_backend(name):
    if name == "numpy":
        return numpy_backend
    if name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
        return _compiled
    raise ValueError(f"unknown kernel backend {name!r}")


def use_backend(name):
    """Switch the process-wide backend; returns the previous one's name."""
    global active
    previous = active.NAME
    active = get_backend(name)
    return previous
