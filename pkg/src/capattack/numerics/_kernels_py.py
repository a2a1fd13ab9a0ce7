"""Pure-NumPy kernels.

Reference implementation for the compiled module
``capattack.numerics._kernels``; both expose the same functions with the
same semantics and the test suite checks them against each other.  All
arrays are float64 and C contiguous.
"""

import numpy as np

from ..errors import DimensionError

BACKEND_NAME = "python"


def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def dense_fwd(w, x, b):
    """y = w @ x + b for w (m,n), x (n,), b (m,)."""
    if w.ndim != 2 or x.ndim != 1 or b.ndim != 1:
        raise DimensionError("dense expects w (m,n), x (n,), b (m,)")
    if w.shape[1] != x.shape[0] or w.shape[0] != b.shape[0]:
        raise DimensionError(
            "dense shape mismatch: w %r, x %r, b %r" % (w.shape, x.shape, b.shape)
        )
    return w @ x + b


def dense_bwd(w, x, gy, need_w, need_x):
    """Adjoints of dense: gw = outer(gy, x), gx = w.T @ gy; gb equals gy."""
    gw = np.outer(gy, x) if need_w else None
    gx = w.T @ gy if need_x else None
    return gw, gx


def tanh_fwd(x):
    return np.tanh(x)


def tanh_bwd(y, gy):
    return gy * (1.0 - y * y)


def log_softmax_fwd(z):
    """Numerically stable log softmax of a nonempty vector."""
    if z.ndim != 1 or z.shape[0] == 0:
        raise DimensionError("log_softmax expects a nonempty vector")
    m = z.max()
    shifted = z - m
    lse = m + np.log(np.exp(shifted).sum())
    return z - lse


def log_softmax_bwd(o, go):
    return go - np.exp(o) * go.sum()


def gru_fwd(x, h, wr, ur, br, wz, uz, bz, wn, un, bn):
    """One GRU step.

    r = sigmoid(wr x + ur h + br)
    z = sigmoid(wz x + uz h + bz)
    c = tanh(wn x + un (r*h) + bn)
    h2 = (1-z)*c + z*h

    Returns (h2, r, z, c); the gate activations are needed for the
    backward pass.
    """
    if x.ndim != 1 or h.ndim != 1:
        raise DimensionError("gru expects vector x and h")
    if wr.shape != (h.shape[0], x.shape[0]) or ur.shape != (h.shape[0], h.shape[0]):
        raise DimensionError(
            "gru shape mismatch: x %r, h %r, wr %r, ur %r"
            % (x.shape, h.shape, wr.shape, ur.shape)
        )
    r = _sigmoid(wr @ x + ur @ h + br)
    z = _sigmoid(wz @ x + uz @ h + bz)
    c = np.tanh(wn @ x + un @ (r * h) + bn)
    h2 = (1.0 - z) * c + z * h
    return h2, r, z, c


def gru_bwd(x, h, r, z, c, wr, ur, wz, uz, wn, un, gh2, need_x, need_h, need_w):
    """Adjoints of gru_fwd given the upstream gradient gh2.

    Returns (gx, gh, pgrads) where pgrads is
    (gwr, gur, gbr, gwz, guz, gbz, gwn, gun, gbn); entries not requested
    via the need_* flags come back as None.
    """
    gc = gh2 * (1.0 - z) * (1.0 - c * c)
    gz = gh2 * (h - c) * z * (1.0 - z)
    gq = un.T @ gc  # adjoint of r*h
    gr = gq * h * r * (1.0 - r)

    gx = wr.T @ gr + wz.T @ gz + wn.T @ gc if need_x else None
    gh = gh2 * z + gq * r + ur.T @ gr + uz.T @ gz if need_h else None
    pgrads = None
    if need_w:
        rh = r * h
        pgrads = (
            np.outer(gr, x),
            np.outer(gr, h),
            gr.copy(),
            np.outer(gz, x),
            np.outer(gz, h),
            gz.copy(),
            np.outer(gc, x),
            np.outer(gc, rh),
            gc.copy(),
        )
    return gx, gh, pgrads
