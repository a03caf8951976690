"""Kernel backend selection.

The compiled extension is preferred when importable; the numpy fallback is
used otherwise. Set MITOFORGE_BACKEND=python (or =cython) to force a choice;
forcing cython raises if the extension was not built.
"""

from __future__ import annotations

import os

from . import _kernels_py

_requested = os.environ.get("MITOFORGE_BACKEND", "").strip().lower()

if _requested == "python":
    _impl = _kernels_py
elif _requested == "cython":
    from . import _kernels_cy as _impl  # ImportError here is intentional
elif _requested == "":
    try:
        from . import _kernels_cy as _impl
    except ImportError:
        _impl = _kernels_py
else:
    raise RuntimeError(f"unknown MITOFORGE_BACKEND value: {_requested!r}")

BACKEND = _impl.BACKEND_NAME
FLAG_SURFACE = _kernels_py.FLAG_SURFACE
FLAG_DEGENERATE = _kernels_py.FLAG_DEGENERATE

mc_collect = _impl.mc_collect
ray_crossings = _impl.ray_crossings
label_components = _impl.label_components
