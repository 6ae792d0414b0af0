"""Kernel backend selection.

The compiled extension (``lbcrb.kernels._native``) is preferred when it
imports; otherwise the NumPy reference backend is used.  Force a choice
with ``LBCRB_BACKEND=native`` or ``LBCRB_BACKEND=reference``.
"""

import os

from . import reference

_requested = os.environ.get("LBCRB_BACKEND", "auto").strip().lower()

if _requested == "reference":
    _impl = reference
    BACKEND = "reference"
elif _requested in ("auto", "native"):
    try:
        from . import _native as _impl
        BACKEND = "native"
    except ImportError:
        if _requested == "native":
            raise
        _impl = reference
        BACKEND = "reference"
else:
    raise ValueError(
        f"LBCRB_BACKEND={_requested!r} not recognized; use 'native' or 'reference'"
    )


def active_backend():
    return BACKEND


sigmoid = _impl.sigmoid
swish_fwd = _impl.swish_fwd
swish_jvp = _impl.swish_jvp
swish_bwd = _impl.swish_bwd
inject_fwd = _impl.inject_fwd
inject_jvp = _impl.inject_jvp
inject_bwd = _impl.inject_bwd
scale_fwd = _impl.scale_fwd
scale_jvp = _impl.scale_jvp
scale_bwd = _impl.scale_bwd
kahan_mean_outer = _impl.kahan_mean_outer
kahan_colmean = _impl.kahan_colmean
adamw_update = _impl.adamw_update
