"""Backend selection for the hot kernels.

The compiled extension is used when importable; ``SEGMINI_PURE=1`` forces
the numpy fallback. ``BACKEND`` names the active implementation.
"""
import os

from . import _kernels_py as py

if os.environ.get("SEGMINI_PURE", "") not in ("", "0"):
    _impl = py
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = py

BACKEND = "compiled" if _impl is not py else "numpy"

depthwise_forward = _impl.depthwise_forward
depthwise_backward = _impl.depthwise_backward
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
hsv_bins = _impl.hsv_bins
lut_lookup = _impl.lut_lookup
lut_segment = _impl.lut_segment


def compiled_available() -> bool:
    try:
        from . import _kernels  # noqa: F401
    except ImportError:
        return False
    return True
