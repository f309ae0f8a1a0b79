"""Kernel backend selection: compiled extension if built, numpy otherwise.

The environment variable ``CPCBAYES_BACKEND`` (``cython`` or ``python``)
forces a choice at import time; ``set_backend`` switches at runtime (used by
the benchmark and the parity tests). Both backends implement the same
``iw_terms`` contract; results agree to floating-point reduction order.
"""

import os

from . import _iw_numpy
from .errors import ConfigError

try:
    from . import _iw_cython
except ImportError:
    _iw_cython = None

_BACKENDS = {"python": _iw_numpy}
if _iw_cython is not None:
    _BACKENDS["cython"] = _iw_cython

_active_name = None
_active = None


def available_backends():
    return sorted(_BACKENDS)


def set_backend(name: str):
    """Select the kernel backend by name ('cython' or 'python')."""
    global _active_name, _active
    if name not in _BACKENDS:
        raise ConfigError(
            f"backend {name!r} not available (have: {', '.join(available_backends())})"
        )
    _active_name = name
    _active = _BACKENDS[name]


def backend_name() -> str:
    return _active_name


def iw_terms(b, c, gamma_inv, nu0, eps):
    return _active.iw_terms(b, c, gamma_inv, nu0, eps)


_requested = os.environ.get("CPCBAYES_BACKEND", "").strip().lower()
if _requested:
    set_backend(_requested)
else:
    set_backend("cython" if "cython" in _BACKENDS else "python")
