"""Compiled loops for the fused batch-norm + ReLU tape node.

Arrays are ``(S, H, B)`` with statistics taken over the last axis.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def bn_relu_forward(h, gain, shift, eps):
    S, H, B = h.shape
    out = np.empty_like(h)
    xhat = np.empty_like(h)
    mu = np.empty((S, H, 1))
    var = np.empty((S, H, 1))
    inv = np.empty((S, H, 1))
    for s in range(S):
        for j in range(H):
            m = 0.0
            for k in range(B):
                m += h[s, j, k]
            m /= B
            v = 0.0
            for k in range(B):
                d = h[s, j, k] - m
                v += d * d
            v /= B
            iv = 1.0 / np.sqrt(v + eps)
            g = gain[s, j, 0]
            b = shift[s, j, 0]
            for k in range(B):
                xh = (h[s, j, k] - m) * iv
                xhat[s, j, k] = xh
                y = xh * g + b
                out[s, j, k] = y if y > 0.0 else 0.0
            mu[s, j, 0] = m
            var[s, j, 0] = v
            inv[s, j, 0] = iv
    return out, xhat, mu, var, inv


@njit(cache=True)
def bn_relu_backward(gout, out, xhat, inv, gain):
    S, H, B = gout.shape
    dh = np.empty_like(gout)
    dgain = np.empty((S, H, 1))
    dshift = np.empty((S, H, 1))
    for s in range(S):
        for j in range(H):
            g = gain[s, j, 0]
            sb = 0.0
            sg = 0.0
            for k in range(B):
                dy = gout[s, j, k] if out[s, j, k] > 0.0 else 0.0
                sb += dy
                sg += dy * xhat[s, j, k]
            dshift[s, j, 0] = sb
            dgain[s, j, 0] = sg
            # dx = g*dy, so its batch mean and its xhat-weighted mean follow from sb, sg.
            m1 = g * sb / B
            m2 = g * sg / B
            iv = inv[s, j, 0]
            for k in range(B):
                dy = gout[s, j, k] if out[s, j, k] > 0.0 else 0.0
                dh[s, j, k] = iv * (g * dy - m1 - xhat[s, j, k] * m2)
    return dh, dgain, dshift
