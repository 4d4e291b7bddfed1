"""Kernel backend selection.

The hot kernels exist twice: a numba-jitted version and a pure-NumPy
reference. The environment variable ``COOPDET_BACKEND`` (``numba`` or
``numpy``) picks the default at import time; numba wins when it is
importable. ``set_backend`` switches at runtime, and ``get_backend``
hands out a specific implementation so benchmarks and equivalence tests
can drive both side by side.
"""

from __future__ import annotations

import os

from . import _kernels_numpy

_BACKENDS = {"numpy": _kernels_numpy}
try:
    from . import _kernels_numba

    _BACKENDS["numba"] = _kernels_numba
except ImportError:  # pragma: no cover - numba is a default dependency
    pass

ENV_VAR = "COOPDET_BACKEND"


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def get_backend(name: str | None = None):
    """Return a kernel module by name (default: the env-selected one)."""
    if name is None:
        name = os.environ.get(ENV_VAR, "numba" if "numba" in _BACKENDS else "numpy")
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(
            f"unknown backend {name!r}; available: {available_backends()}"
        ) from None


_active = get_backend()


def kernels():
    """The currently active kernel module."""
    return _active


def set_backend(name: str) -> None:
    global _active
    _active = get_backend(name)


def warmup() -> None:
    """Trigger JIT compilation of the active backend on tiny inputs."""
    import numpy as np

    k = kernels()
    idx = np.array([[1, 1]], np.int64)
    feats = np.ones((1, 2), np.float64)
    w = np.zeros((9, 2, 2), np.float64)
    b = np.zeros(2, np.float64)
    k.conv_active(idx, feats, w, b, 2, 2, 2)
    k.subm_active(idx, feats, w, b, 3, 3)
    k.maxpool_keep(idx, np.ones(1, np.float64), 3, 3, 3)
    k.mc_iou(
        np.array([0.0, 0.0, 1.0, 1.0, 0.0]),
        np.array([0.0, 0.0, 1.0, 1.0, 0.0]),
        10,
        0,
    )
