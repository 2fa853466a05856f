"""Shared finite-difference oracles and small utilities for the test suite.

The FD helpers are the independent reference for every "derivatives are
exact" claim: they never call the code path under test.
"""

import numpy as np


def fd_gradient(f, x, eps=1e-6):
    """Central-difference gradient of scalar f at a single point x (d,)."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for j in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[j] += eps
        xm[j] -= eps
        g[j] = (f(xp) - f(xm)) / (2 * eps)
    return g


def fd_jacobian(f, x, eps=1e-6):
    """Central-difference Jacobian of vector-valued f at a point x (d,)."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[j] += eps
        xm[j] -= eps
        cols.append((np.asarray(f(xp)) - np.asarray(f(xm))) / (2 * eps))
    return np.stack(cols, axis=-1)


def fd_directional(f, theta, v, eps=1e-6):
    """(f(theta + eps v) - f(theta - eps v)) / (2 eps) for flat parameter vectors."""
    theta = np.asarray(theta, dtype=float)
    v = np.asarray(v, dtype=float)
    return (f(theta + eps * v) - f(theta - eps * v)) / (2 * eps)


def rel_err(a, b, floor=1.0):
    """Max relative error, scaled by floor + magnitude."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / (floor + np.abs(b))))
