"""Backend selection for the per-column kernels.

The compiled extension is used when it was built; set
``DALKSEG_PURE_PYTHON=1`` to force the numpy fallback.
"""
from __future__ import annotations

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("DALKSEG_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        pass

decode_transitions = _impl.decode_transitions
band_confidence = _impl.band_confidence


def backends() -> dict:
    """Every importable implementation, keyed by name (for tests/benchmarks)."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
