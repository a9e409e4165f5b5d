"""Independent reference implementations used as test oracles.

Nothing here imports the geometry or network code under test; each oracle
is written from the closed-form mathematics or by finite differences.
"""

import numpy as np


# ---- closed-form geometry -------------------------------------------------------------


def s2_christoffel(x):
    """Gamma[k, i, j] of the unit sphere in (colatitude, longitude)."""
    t = x[0]
    g = np.zeros((2, 2, 2))
    g[0, 1, 1] = -np.sin(t) * np.cos(t)
    g[1, 0, 1] = g[1, 1, 0] = np.cos(t) / np.sin(t)
    return g


def s2_metric(x):
    return np.diag([1.0, np.sin(x[0]) ** 2])


def great_circle(p, q):
    """Spherical law of cosines on S^2 in (colatitude, longitude)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    c = (np.cos(p[..., 0]) * np.cos(q[..., 0])
         + np.sin(p[..., 0]) * np.sin(q[..., 0]) * np.cos(q[..., 1] - p[..., 1]))
    return np.arccos(np.clip(c, -1.0, 1.0))


def peaks_height(x, y):
    return (3 * (1 - x) ** 2 * np.exp(-x ** 2 - (y + 1) ** 2)
            - 10 * (x / 5 - x ** 3 - y ** 5) * np.exp(-x ** 2 - y ** 2)
            - np.exp(-(x + 1) ** 2 - y ** 2) / 3)


def graph_scalar_curvature(f, x, y, h=1e-3):
    """R = 2K for the graph z = f(x, y), K from fourth-order finite differences."""
    def d(fun, dx, dy):
        return (-fun(x + 2 * dx, y + 2 * dy) + 8 * fun(x + dx, y + dy)
                - 8 * fun(x - dx, y - dy) + fun(x - 2 * dx, y - 2 * dy)) / (12 * h)

    fx = d(f, h, 0)
    fy = d(f, 0, h)
    fxx = (-f(x + 2 * h, y) + 16 * f(x + h, y) - 30 * f(x, y) + 16 * f(x - h, y) - f(x - 2 * h, y)) / (12 * h * h)
    fyy = (-f(x, y + 2 * h) + 16 * f(x, y + h) - 30 * f(x, y) + 16 * f(x, y - h) - f(x, y - 2 * h)) / (12 * h * h)
    fxy = (f(x + h, y + h) - f(x + h, y - h) - f(x - h, y + h) + f(x - h, y - h)) / (4 * h * h)
    K = (fxx * fyy - fxy ** 2) / (1 + fx ** 2 + fy ** 2) ** 2
    return 2 * K


def gmm_density(weights, means, covs):
    def f(x, y):
        out = 0.0
        for a, m, c in zip(weights, means, covs):
            ci = np.linalg.inv(c)
            dx, dy = x - m[0], y - m[1]
            quad = ci[0, 0] * dx * dx + 2 * ci[0, 1] * dx * dy + ci[1, 1] * dy * dy
            out = out + a * np.exp(-0.5 * quad) / (2 * np.pi * np.sqrt(np.linalg.det(c)))
        return out
    return f


def fd_jacobian(fn, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def fd_metric(embed, x, h=1e-6):
    J = fd_jacobian(embed, x, h)
    return J.T @ J


def rk4_reference(rhs, y0, t1, steps):
    """Plain fixed-step RK4 for y' = rhs(y)."""
    y = np.asarray(y0, dtype=float)
    h = t1 / steps
    for _ in range(steps):
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * h * k1)
        k3 = rhs(y + 0.5 * h * k2)
        k4 = rhs(y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


# ---- network --------------------------------------------------------------------------


def mlp_value(arrays, x, depth, fourier=None):
    """Straight-line numpy forward pass of the modified MLP (value only)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if fourier is not None:
        z = x @ fourier
        x = np.hstack([x, np.sin(z), np.cos(z)])
    u = np.tanh(x @ arrays["enc_u.w"] + arrays["enc_u.b"])
    v = np.tanh(x @ arrays["enc_v.w"] + arrays["enc_v.b"])
    h = x
    for k in range(depth):
        z = np.tanh(h @ arrays[f"hidden{k}.w"] + arrays[f"hidden{k}.b"])
        h = (1 - z) * u + z * v
    return (h @ arrays["head.w"] + arrays["head.b"])[:, 0]


def adam_reference(grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Parameter trajectory of scalar Adam over a fixed gradient sequence."""
    m = v = 0.0
    theta = 0.0
    out = []
    for t, g in enumerate(grads, 1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        theta -= lr * (m / (1 - beta1 ** t)) / (np.sqrt(v / (1 - beta2 ** t)) + eps)
        out.append(theta)
    return np.array(out)
