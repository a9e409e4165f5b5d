"""Fused elementwise kernels for the modified-MLP forward/backward passes.

Arrays are (N, W) for values and (k, N, W) for the k tangent streams. The
matrix products stay in numpy/BLAS; these loops replace the long chains of
temporaries between them. tanh itself is evaluated by numpy beforehand
because its SIMD implementation beats a scalar loop by an order of magnitude.
"""

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def tanh_tangent(y, dpre, dy):
    """dy = (1 - y^2) dpre for y = tanh(pre)."""
    K, N, W = dpre.shape
    for n in range(N):
        for k in range(K):
            for j in range(W):
                dy[k, n, j] = (1.0 - y[n, j] * y[n, j]) * dpre[k, n, j]


@njit(cache=True, fastmath=True)
def blend_forward(z, dpre, u, du, v, dv, h, dh):
    """h = u + z (v - u); dh = du + dz (v - u) + z (dv - du), z = tanh(pre)."""
    K, N, W = dpre.shape
    for n in range(N):
        for j in range(W):
            h[n, j] = u[n, j] + z[n, j] * (v[n, j] - u[n, j])
        for k in range(K):
            for j in range(W):
                t = z[n, j]
                dh[k, n, j] = (du[k, n, j] + (1.0 - t * t) * dpre[k, n, j] * (v[n, j] - u[n, j])
                               + t * (dv[k, n, j] - du[k, n, j]))


@njit(cache=True, fastmath=True)
def blend_backward(gh, gdh, z, dpre, u, du, v, dv, gu, gv, gdu, gdv, gpre, gdpre):
    """Reverse of ``blend_forward``; accumulates into gu, gv, gdu, gdv."""
    K, N, W = dpre.shape
    cross = np.empty(W, dpre.dtype)
    gz = np.empty(W, dpre.dtype)
    acc = np.empty(W, dpre.dtype)
    for n in range(N):
        for j in range(W):
            cross[j] = 0.0
            acc[j] = 0.0
            gz[j] = gh[n, j] * (v[n, j] - u[n, j])
        for k in range(K):
            for j in range(W):
                t = z[n, j]
                s = 1.0 - t * t
                d = v[n, j] - u[n, j]
                gk = gdh[k, n, j]
                cross[j] += gk * s * dpre[k, n, j]
                gz[j] += gk * (dv[k, n, j] - du[k, n, j])
                gdu[k, n, j] += gk * (1.0 - t)
                gdv[k, n, j] += gk * t
                acc[j] += gk * d * dpre[k, n, j]
                gdpre[k, n, j] = s * gk * d
        for j in range(W):
            t = z[n, j]
            s = 1.0 - t * t
            g = gh[n, j]
            gu[n, j] += g * (1.0 - t) - cross[j]
            gv[n, j] += g * t + cross[j]
            gpre[n, j] = s * gz[j] - 2.0 * t * s * acc[j]


@njit(cache=True, fastmath=True)
def tanh_backward(y, dpre, gy, gdy, gpre, gdpre):
    """Reverse of ``tanh_tangent``."""
    K, N, W = dpre.shape
    acc = np.empty(W, dpre.dtype)
    for n in range(N):
        for j in range(W):
            acc[j] = 0.0
        for k in range(K):
            for j in range(W):
                acc[j] += gdy[k, n, j] * dpre[k, n, j]
                gdpre[k, n, j] = (1.0 - y[n, j] * y[n, j]) * gdy[k, n, j]
        for j in range(W):
            t = y[n, j]
            s = 1.0 - t * t
            gpre[n, j] = s * gy[n, j] - 2.0 * t * s * acc[j]
