"""Conical-product quadrature on the reference tetrahedron and triangle.

Rules are built from 1D Gauss-Jacobi points, so any polynomial exactness
degree is available; weights sum to the reference volumes (1/6 and 1/2).
"""

import numpy as np
from scipy.special import roots_jacobi


def _jacobi01(n, alpha):
    """Gauss-Jacobi rule with weight (1-x)^alpha mapped to [0, 1]."""
    x, w = roots_jacobi(n, alpha, 0.0)
    return 0.5 * (x + 1.0), w / 2.0 ** (alpha + 1)


def tet_rule(degree):
    """Points (nq, 3) and weights (nq,) exact for polynomials of ``degree``."""
    n = degree // 2 + 1
    x1, w1 = _jacobi01(n, 2.0)
    x2, w2 = _jacobi01(n, 1.0)
    x3, w3 = _jacobi01(n, 0.0)
    pts, wts = [], []
    for a, wa in zip(x1, w1):
        for b, wb in zip(x2, w2):
            for c, wc in zip(x3, w3):
                x = a
                y = b * (1.0 - a)
                z = c * (1.0 - a) * (1.0 - b)
                pts.append((x, y, z))
                wts.append(wa * wb * wc)
    return np.array(pts), np.array(wts)


def tri_rule(degree):
    """Points (nq, 2) and weights (nq,) on the reference triangle."""
    n = degree // 2 + 1
    x1, w1 = _jacobi01(n, 1.0)
    x2, w2 = _jacobi01(n, 0.0)
    pts, wts = [], []
    for a, wa in zip(x1, w1):
        for b, wb in zip(x2, w2):
            pts.append((a, b * (1.0 - a)))
            wts.append(wa * wb)
    return np.array(pts), np.array(wts)
