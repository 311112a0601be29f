"""Select the LSTM recurrence backend at import time.

The compiled extension is used when it was built; setting the environment
variable ``HYBRIDOCC_PURE_PYTHON=1`` forces the numpy fallback.
"""
import os

from . import _lstm_py

if os.environ.get("HYBRIDOCC_PURE_PYTHON", "") not in ("", "0"):
    _ext = None
else:
    try:
        from . import _lstm_ext as _ext
    except ImportError:
        _ext = None

if _ext is not None:
    BACKEND = "compiled"
    lstm_scan_forward = _ext.lstm_scan_forward
    lstm_scan_backward = _ext.lstm_scan_backward
else:
    BACKEND = "python"
    lstm_scan_forward = _lstm_py.lstm_scan_forward
    lstm_scan_backward = _lstm_py.lstm_scan_backward


def available_backends():
    """Map of backend name to (forward, backward) kernel pair."""
    out = {"python": (_lstm_py.lstm_scan_forward, _lstm_py.lstm_scan_backward)}
    try:
        from . import _lstm_ext
    except ImportError:
        return out
    out["compiled"] = (_lstm_ext.lstm_scan_forward, _lstm_ext.lstm_scan_backward)
    return out
