"""Hot per-pixel kernels, compiled when available.

The Cython build in ``_kernels`` is used when it imports; otherwise the numpy
versions in ``_fallback`` take over. Set ``PCNET_PURE_PYTHON=1`` to force the
fallback.
"""
import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("PCNET_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        _impl = _fallback


def backends():
    """Available kernel modules, keyed by name."""
    out = {"python": _fallback}
    try:
        from . import _kernels
        out["cython"] = _kernels
    except ImportError:
        pass
    return out


def warp_bilinear(img, m, out_hw=None):
    import numpy as np

    return _impl.warp_bilinear(np.ascontiguousarray(img, dtype=np.float64),
                               np.ascontiguousarray(m, dtype=np.float64),
                               None if out_hw is None else tuple(int(v) for v in out_hw))


def s_measure(pred, gt, alpha=0.5):
    import numpy as np

    return float(_impl.s_measure(np.ascontiguousarray(pred, dtype=np.float64),
                                 np.ascontiguousarray(gt, dtype=np.float64), alpha))
