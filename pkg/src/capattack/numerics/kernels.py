"""Kernel backend selection.

The compiled extension is preferred when importable; set
``CAPATTACK_BACKEND=python`` or ``CAPATTACK_BACKEND=compiled`` to force a
backend (forcing ``compiled`` raises if the extension is missing).
"""

import os

_requested = os.environ.get("CAPATTACK_BACKEND", "auto").strip().lower()

if _requested in ("", "auto"):
    try:
        from . import _kernels as _impl
    except ImportError:
        from . import _kernels_py as _impl
elif _requested in ("compiled", "c"):
    from . import _kernels as _impl
elif _requested in ("python", "py"):
    from . import _kernels_py as _impl
else:
    raise ImportError(
        "unknown CAPATTACK_BACKEND=%r (expected auto, compiled, or python)" % _requested
    )

BACKEND = _impl.BACKEND_NAME

dense_fwd = _impl.dense_fwd
dense_bwd = _impl.dense_bwd
tanh_fwd = _impl.tanh_fwd
tanh_bwd = _impl.tanh_bwd
log_softmax_fwd = _impl.log_softmax_fwd
log_softmax_bwd = _impl.log_softmax_bwd
gru_fwd = _impl.gru_fwd
gru_bwd = _impl.gru_bwd
