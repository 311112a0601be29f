"""Pure-numpy LSTM recurrence kernels (fallback for the compiled core).

Both kernels work on pre-projected inputs: ``xw[b, t] = x[b, t] @ W + bias``
with the four gates packed as [input, forget, candidate, output] blocks of
width H.  Only the recurrent part ``h_{t-1} @ U`` is done here.
"""
import numpy as np


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def lstm_scan_forward(xw, U, reverse=False):
    """Run the recurrence over axis 1 of ``xw`` (B, T, 4H).

    Returns ``(hs, cs, gates)`` with hs, cs of shape (B, T, H) and the
    activated gates (B, T, 4H), all indexed by original time position.
    """
    xw = np.ascontiguousarray(xw, dtype=np.float64)
    U = np.ascontiguousarray(U, dtype=np.float64)
    B, T, G = xw.shape
    H = G // 4
    hs = np.empty((B, T, H))
    cs = np.empty((B, T, H))
    gates = np.empty((B, T, G))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for n, t in enumerate(steps):
        z = xw[:, t] + h @ U if n else xw[:, t].copy()
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = _sigmoid(z[:, 3 * H:])
        c = f * c + i * g
        h = o * np.tanh(c)
        hs[:, t] = h
        cs[:, t] = c
        gates[:, t, :H] = i
        gates[:, t, H:2 * H] = f
        gates[:, t, 2 * H:3 * H] = g
        gates[:, t, 3 * H:] = o
    return hs, cs, gates


def lstm_scan_backward(dhs, U, hs, cs, gates, reverse=False):
    """Backprop through time.  Returns ``(dxw, dU)``."""
    dhs = np.ascontiguousarray(dhs, dtype=np.float64)
    B, T, H = dhs.shape
    dxw = np.empty((B, T, 4 * H))
    dU = np.zeros((H, 4 * H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    steps = list(range(T - 1, -1, -1) if reverse else range(T))
    for n in range(T - 1, -1, -1):
        t = steps[n]
        i = gates[:, t, :H]
        f = gates[:, t, H:2 * H]
        g = gates[:, t, 2 * H:3 * H]
        o = gates[:, t, 3 * H:]
        tc = np.tanh(cs[:, t])
        c_prev = cs[:, steps[n - 1]] if n else np.zeros((B, H))
        dh = dhs[:, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz = np.empty((B, 4 * H))
        dz[:, :H] = dc * g * i * (1.0 - i)
        dz[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
        dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
        dxw[:, t] = dz
        if n:
            dU += hs[:, steps[n - 1]].T @ dz
        dh_next = dz @ U.T
        dc_next = dc * f
    return dxw, dU
