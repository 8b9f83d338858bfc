"""Hot-kernel dispatch.

The compiled ``_kernels`` extension is used when it imports; otherwise the
numpy versions in ``_kernels_py`` are. Set ``SCATTERNET_PURE_PYTHON=1`` to
force the fallback.
"""
from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("SCATTERNET_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

assemble_impedance = _impl.assemble_impedance
farthest_point_sampling = _impl.farthest_point_sampling
triangle_integrals = _impl.triangle_integrals
self_integrals = _impl.self_integrals
masked_logits = _impl.masked_logits
masked_logits_shifted = _impl.masked_logits_shifted
shift_rows = _impl.shift_rows

__all__ = [
    "BACKEND",
    "assemble_impedance",
    "farthest_point_sampling",
    "masked_logits",
    "masked_logits_shifted",
    "shift_rows",
    "self_integrals",
    "triangle_integrals",
]
