"""Splat kernel lane selection.

Prefers the compiled Cython extension; falls back to the pure-numpy twin
when the extension is missing or HANDLAYOUT_PURE=1 is set. Both lanes share
one contract and agree to floating-point noise; `benchmarks/bench_splat.py`
compares their throughput.
"""

import os

if os.environ.get("HANDLAYOUT_PURE", "") == "1":
    from . import _splat_py as _impl
else:
    try:
        from . import _splat as _impl  # type: ignore[attr-defined]
    except ImportError:
        from . import _splat_py as _impl

splat_grid = _impl.splat_grid
splat_jacobian_grid = _impl.splat_jacobian_grid


def backend_name() -> str:
    """Either "cython" (compiled extension) or "numpy" (fallback)."""
    return _impl.BACKEND
