"""Kernel backend selection.

The compiled Cython core is preferred when built; the NumPy fallback is
selected otherwise.  Set ``REFIELD_BACKEND=fallback`` (or ``compiled``) to
force a backend; forcing ``compiled`` raises if the extension is missing.
"""

import os

from . import _fallback

_forced = os.environ.get("REFIELD_BACKEND", "").strip().lower()

if _forced == "fallback":
    _impl = _fallback
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]
    except ImportError:
        if _forced == "compiled":
            raise ImportError(
                "REFIELD_BACKEND=compiled but the extension is not built; "
                "run `pip install -e . --no-build-isolation`"
            )
        _impl = _fallback

BACKEND = _impl.BACKEND
sample_trilinear = _impl.sample_trilinear
march_dense = _impl.march_dense
march_octree = _impl.march_octree
visibility = _impl.visibility
gkd_sample = _impl.gkd_sample
# present on the compiled backend only; callers fall back to their NumPy
# bodies otherwise
shade_terms = getattr(_impl, "shade_terms", None)
env_gather = getattr(_impl, "env_gather", None)
env_scatter = getattr(_impl, "env_scatter", None)
