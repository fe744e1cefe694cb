"""Compiled time loop for the GRU backward pass.

The forward pass stays in numpy: its vectorized tanh is far faster than
the scalar libm calls a compiled loop would make.

Arrays are laid out with rows sorted by descending sequence length, so the
rows still active at step ``t`` are exactly ``[:counts[t]]``.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def gru_backward_loop(dhs, h0, hs, r_all, u_all, n_all, W_h, W_hn, counts):
    B, T, H = hs.shape
    dgx = np.zeros((B, T, 3 * H))
    dW_h = np.zeros(W_h.shape)
    dW_hn = np.zeros(W_hn.shape)
    W_hT = np.ascontiguousarray(W_h.T)
    W_hnT = np.ascontiguousarray(W_hn.T)
    dh_next = np.zeros((B, H))
    hp = np.empty((B, H))
    dan = np.empty((B, H))
    rh = np.empty((B, H))
    dg = np.empty((B, 2 * H))
    for t in range(T - 1, -1, -1):
        k = counts[t]
        for i in range(B):
            for j in range(H):
                hp[i, j] = hs[i, t - 1, j] if t > 0 else h0[i, j]
        # rows past their length pass the gradient straight through
        for i in range(k, B):
            for j in range(H):
                dh_next[i, j] += dhs[i, t, j]
        for i in range(k):
            for j in range(H):
                dh = dhs[i, t, j] + dh_next[i, j]
                u = u_all[i, t, j]
                n = n_all[i, t, j]
                dn = dh * (1.0 - u)
                dg[i, H + j] = dh * (hp[i, j] - n) * u * (1.0 - u)
                dan[i, j] = dn * (1.0 - n * n)
                rh[i, j] = r_all[i, t, j] * hp[i, j]
                dh_next[i, j] = dh * u
        dW_hn += np.dot(rh[:k].T, dan[:k])
        drh = np.dot(dan[:k], W_hnT)
        for i in range(k):
            for j in range(H):
                r = r_all[i, t, j]
                dg[i, j] = drh[i, j] * hp[i, j] * r * (1.0 - r)
                dh_next[i, j] += drh[i, j] * r
        dW_h += np.dot(hp[:k].T, dg[:k])
        dhp = np.dot(dg[:k], W_hT)
        for i in range(k):
            for j in range(H):
                dh_next[i, j] += dhp[i, j]
                dgx[i, t, j] = dg[i, j]
                dgx[i, t, H + j] = dg[i, H + j]
                dgx[i, t, 2 * H + j] = dan[i, j]
    return dgx, dW_h, dW_hn
