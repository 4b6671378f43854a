"""Runtime selection between the compiled and pure-numpy convolution kernels.

The compiled extension is preferred when importable. Selection happens once
at import and can be overridden either with the VOXELFORMER_BACKEND
environment variable ("native" or "numpy") or at runtime via use_backend(),
which the kernel benchmark uses to time both implementations.
"""

import os

from . import _reference

try:
    from . import _native
except ImportError:  # extension not built; numpy fallback keeps everything working
    _native = None

_BACKENDS = {"numpy": _reference}
if _native is not None:
    _BACKENDS["native"] = _native

NATIVE_AVAILABLE = _native is not None


def _default_name() -> str:
    env = os.environ.get("VOXELFORMER_BACKEND")
    if env:
        if env not in _BACKENDS:
            raise ValueError(
                f"VOXELFORMER_BACKEND={env!r} is not available; "
                f"choose from {sorted(_BACKENDS)}"
            )
        return env
    return "native" if NATIVE_AVAILABLE else "numpy"


_active = _BACKENDS[_default_name()]


def available_backends():
    return sorted(_BACKENDS)


def current_backend() -> str:
    return _active.NAME


def use_backend(name: str):
    """Switch the active kernel backend; returns the previous name."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; choose from {sorted(_BACKENDS)}")
    previous = _active.NAME
    _active = _BACKENDS[name]
    return previous


def kernels():
    """The module providing conv3d_* / dwconv3d_* kernels."""
    return _active
