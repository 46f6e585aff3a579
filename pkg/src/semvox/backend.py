"""Backend selection.

The compiled core is preferred when importable; SEMVOX_BACKEND=python or
SEMVOX_BACKEND=native forces a choice (forcing native without the extension
built is an error).  Both modules expose the same surface: GridCore,
raycast_band, integrate_points, BACKEND_NAME.
"""

from __future__ import annotations

import os

from . import _pycore
from .errors import ConfigError

try:
    from . import _core  # type: ignore[attr-defined]

    NATIVE_AVAILABLE = True
except ImportError:
    _core = None
    NATIVE_AVAILABLE = False


def get_backend(name: str | None = None):
    """Resolve a backend module by name, env var, or availability."""
    if name is None:
        name = os.environ.get("SEMVOX_BACKEND", "").strip().lower() or None
    if name in (None, "auto"):
        return _core if NATIVE_AVAILABLE else _pycore
    if name == "python":
        return _pycore
    if name == "native":
        if not NATIVE_AVAILABLE:
            raise ConfigError("native backend requested but the compiled core is not built")
        return _core
    raise ConfigError(f"unknown backend {name!r} (expected auto, python, or native)")


DEFAULT = get_backend()
