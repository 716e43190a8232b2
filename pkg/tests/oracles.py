"""Independent reference computations used by the test suite.

These deliberately avoid the library code paths they check: the cubic is
solved in closed form (trigonometric/Cardano) instead of via companion-matrix
eigenvalues, linear steady states come from the analytic coupled-mode formula,
and Gaussian Wigner moments are evaluated symbolically.
"""

from __future__ import annotations

import numpy as np


def cardano_real_roots(a: float, b: float, c: float, d: float) -> np.ndarray:
    """Real roots of a*x^3 + b*x^2 + c*x + d = 0, ascending (a != 0)."""
    b, c, d = b / a, c / a, d / a
    p = c - b * b / 3.0
    q = 2.0 * b**3 / 27.0 - b * c / 3.0 + d
    shift = -b / 3.0
    disc = (q / 2.0) ** 2 + (p / 3.0) ** 3
    if disc > 0:  # one real root
        s = np.sqrt(disc)
        u = np.cbrt(-q / 2.0 + s)
        v = np.cbrt(-q / 2.0 - s)
        return np.array([u + v + shift])
    if p == 0:  # triple root
        return np.array([shift])
    # three real roots (trigonometric form)
    m = 2.0 * np.sqrt(-p / 3.0)
    theta = np.arccos(np.clip(3.0 * q / (p * m), -1.0, 1.0)) / 3.0
    roots = m * np.cos(theta - 2.0 * np.pi * np.array([0, 1, 2]) / 3.0) + shift
    return np.sort(roots)


def steady_cubic_roots(delta, u, zj, f, gamma=1.0) -> np.ndarray:
    """Non-negative real roots of n*((delta+zj-u*n)^2 + gamma^2/4) = f^2."""
    w0 = delta + zj
    if u == 0.0:
        return np.array([f**2 / (w0**2 + gamma**2 / 4.0)])
    roots = cardano_real_roots(u * u, -2.0 * u * w0, w0 * w0 + gamma**2 / 4.0, -(f**2))
    return np.sort(roots[roots >= -1e-12])


def linear_steady_population(delta, zj, f, gamma=1.0) -> float:
    """Steady <a^dag a> of the linear (u=0) homogeneously driven lattice."""
    return f**2 / ((delta + zj) ** 2 + gamma**2 / 4.0)


def count_roots_scan(delta, u, zj, f, gamma=1.0, n_grid=200001) -> int:
    """Root count by dense sign-change scan of the cubic (spinodal oracle)."""
    w0 = delta + zj
    n_hi = max(4.0 * w0 / max(u, 1e-12), 10.0 * f**2, 10.0)
    n = np.linspace(0.0, n_hi, n_grid)
    g = n * ((w0 - u * n) ** 2 + gamma**2 / 4.0) - f**2
    return int(np.sum(np.sign(g[1:]) != np.sign(g[:-1])))


def wigner_gaussian_moments(alpha0: complex, sigma2: float = 0.5):
    """(<|a|^2>, <|a|^4>) of a complex Gaussian cloud around alpha0."""
    n0 = abs(alpha0) ** 2
    m2 = n0 + sigma2
    m4 = n0**2 + 4.0 * n0 * sigma2 + 2.0 * sigma2**2
    return m2, m4
