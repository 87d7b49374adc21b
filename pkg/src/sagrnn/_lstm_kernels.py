"""Compiled backward-through-time loop for the grouped LSTM scan.

Buffers are time-major ``[M, B, K, *]`` and indexed by sequence position, so
reversed directions need no copies: their scan simply walks positions
backwards.  ``acts`` holds the activated gates (i, f, g, o) and ``c_prev`` the
cell state entering the step at each position.
"""

import numba
import numpy as np


@numba.njit(cache=True, fastmath=True)
def scan_backward(grad, acts, c_prev, tanh_c, hs, w_hh, reverse):
    """Returns gate pre-activation gradients ``dz`` and recurrent weight gradients."""
    M, Bn, K, G = acts.shape
    H = G // 4
    dz = np.empty((M, Bn, K, G))
    dw_hh = np.zeros((K, G, H))
    dh_next = np.zeros((Bn, K, H))
    dc_next = np.zeros((Bn, K, H))
    for s in range(M - 1, -1, -1):
        for k in range(K):
            t = M - 1 - s if reverse[k] else s
            tp = M - s if reverse[k] else s - 1  # position of the previous scan step
            for b in range(Bn):
                for q in range(H):
                    i = acts[t, b, k, q]
                    f = acts[t, b, k, H + q]
                    g = acts[t, b, k, 2 * H + q]
                    o = acts[t, b, k, 3 * H + q]
                    tc = tanh_c[t, b, k, q]
                    dh = grad[t, b, k, q] + dh_next[b, k, q]
                    dc = dh * o * (1.0 - tc * tc) + dc_next[b, k, q]
                    dz[t, b, k, q] = dc * g * i * (1.0 - i)
                    dz[t, b, k, H + q] = dc * c_prev[t, b, k, q] * f * (1.0 - f)
                    dz[t, b, k, 2 * H + q] = dc * i * (1.0 - g * g)
                    dz[t, b, k, 3 * H + q] = dh * tc * o * (1.0 - o)
                    dc_next[b, k, q] = dc * f
                    dh_next[b, k, q] = 0.0
                if s > 0:
                    for j in range(G):
                        d = dz[t, b, k, j]
                        for q in range(H):
                            dh_next[b, k, q] += d * w_hh[k, j, q]
                            dw_hh[k, j, q] += d * hs[tp, b, k, q]
    return dz, dw_hh
