"""Hot geometric, convolution and splatting kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it imports; set ``PROTOSHAPE_PURE=1``
to force the numpy versions. ``BACKEND`` names the active one.
"""

import os

from . import _fallback

_compiled = None
if os.environ.get("PROTOSHAPE_PURE") != "1":
    try:
        from . import _ckernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

_impl = _compiled if _compiled is not None else _fallback
BACKEND = "cython" if _compiled is not None else "numpy"

nn_brute = _impl.nn_brute
nn_grid = _impl.nn_grid
fps = _impl.fps
zbuffer = _impl.zbuffer
im2col = _impl.im2col
splat = _impl.splat
splat_grad = _impl.splat_grad


def backends():
    """Map of backend name to kernel module for every importable backend."""
    out = {"numpy": _fallback}
    if _compiled is not None:
        out["cython"] = _compiled
    return out


def default_cell(n_ref, extent=1.0):
    """Grid spacing targeting roughly two reference points per cell."""
    return extent / max(1.0, (n_ref / 2.0) ** (1.0 / 3.0))
