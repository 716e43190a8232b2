"""Gross-Pitaevskii mean-field steady states and their stability.

For a homogeneous field alpha on a periodic lattice the classical steady-state
condition is

    n * ((delta + z*j_hop - u*n)^2 + gamma^2/4) = f^2,      n = |alpha|^2,

a cubic in n with one or three non-negative real roots; in the bistable window
the outer branches are dynamically stable and the middle one is not. Hopping
enters only through the product z*j_hop, so 1D and 2D lattices with the same
zJ share the same mean-field curve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelParams

__all__ = [
    "MeanFieldBranch",
    "meanfield_roots",
    "meanfield_sweep",
    "SweepResult",
]

_RESIDUAL_TOL = 1e-10


@dataclass(frozen=True)
class MeanFieldBranch:
    """One homogeneous fixed point: population per site, amplitude, stability."""

    n: float
    alpha: complex
    stable: bool


def _cubic_coeffs(params: ModelParams, f: float | None = None):
    """Coefficients (highest first) of the steady-state cubic in n."""
    w0 = params.delta + params.zj
    g = params.gamma
    ff = params.f if f is None else f
    return np.array(
        [params.u**2, -2.0 * params.u * w0, w0**2 + g**2 / 4.0, -(ff**2)]
    )


def _residual(params: ModelParams, n: float) -> float:
    w = params.delta + params.zj - params.u * n
    return abs(n * (w**2 + params.gamma**2 / 4.0) - params.f**2)


def _stability(params: ModelParams, n: float, alpha: complex) -> bool:
    """Linear stability of the homogeneous fixed point.

    Jacobian of the (alpha, alpha*) dynamics restricted to homogeneous
    perturbations; stable iff both eigenvalues have negative real part.
    """
    w2 = params.delta + params.zj - 2.0 * params.u * n
    a = 1j * w2 - 0.5 * params.gamma
    b = -1j * params.u * alpha**2
    jac = np.array([[a, b], [np.conj(b), np.conj(a)]])
    return bool(np.all(np.linalg.eigvals(jac).real < 0.0))


def meanfield_roots(params: ModelParams) -> list[MeanFieldBranch]:
    """All homogeneous steady states, in increasing population.

    Roots come from the companion-matrix eigenvalues of the cubic (np.roots),
    polished with a Newton step; each is converted back to the complex
    amplitude through i*f = alpha * (i*(delta + zJ - u*n) - gamma/2).
    """
    g = params.gamma
    w0 = params.delta + params.zj
    if params.u == 0.0:
        ns = np.array([params.f**2 / (w0**2 + g**2 / 4.0)])
    else:
        coeffs = _cubic_coeffs(params)
        roots = np.roots(coeffs)
        scale = max(1.0, float(np.abs(roots).max()))
        real = roots[np.abs(roots.imag) < 1e-9 * scale].real
        ns = np.sort(real[real >= -1e-9 * scale])
        ns = np.clip(ns, 0.0, None)
        # one Newton polish per root; companion eigenvalues are already ~1e-12
        dp = np.polyder(coeffs)
        for _ in range(2):
            p = np.polyval(coeffs, ns)
            d = np.polyval(dp, ns)
            ns = np.where(np.abs(d) > 0, ns - p / np.where(d == 0, 1.0, d), ns)
        ns = np.clip(ns, 0.0, None)
    branches = []
    for n in ns:
        w = w0 - params.u * n
        denom = w**2 + g**2 / 4.0
        alpha = params.f * (w - 0.5j * g) / denom
        res = _residual(params, n)
        if res > _RESIDUAL_TOL * max(params.f**2, g**2):
            raise RuntimeError(
                f"mean-field root n={n} has residual {res:.3e} beyond tolerance"
            )
        branches.append(
            MeanFieldBranch(n=float(n), alpha=complex(alpha), stable=_stability(params, n, alpha))
        )
    return branches


@dataclass(frozen=True)
class SweepResult:
    """Mean-field branches on a drive grid plus the bistable window, if any."""

    f_values: np.ndarray
    branches: list[list[MeanFieldBranch]]
    spinodal_lower: float | None
    spinodal_upper: float | None


def _discriminant(params: ModelParams, f: float) -> float:
    a, b, c, d = _cubic_coeffs(params, f)
    return (
        18.0 * a * b * c * d
        - 4.0 * b**3 * d
        + b**2 * c**2
        - 4.0 * a * c**3
        - 27.0 * a**2 * d**2
    )


def _bisect_spinodal(params: ModelParams, f_lo: float, f_hi: float, tol: float = 1e-6) -> float:
    s_lo = np.sign(_discriminant(params, f_lo))
    while f_hi - f_lo > tol:
        mid = 0.5 * (f_lo + f_hi)
        if np.sign(_discriminant(params, mid)) == s_lo:
            f_lo = mid
        else:
            f_hi = mid
    return 0.5 * (f_lo + f_hi)


def meanfield_sweep(params: ModelParams, f_values) -> SweepResult:
    """meanfield_roots over a drive grid, with spinodal endpoints.

    Spinodals (where the root count switches 1 <-> 3) are located by the sign
    change of the cubic discriminant between grid points and refined by
    bisection to 1e-6 in units of gamma.
    """
    f_values = np.asarray(f_values, dtype=float)
    if f_values.size == 0:
        raise ValueError("f_values must be non-empty")
    if np.any(f_values < 0):
        raise ValueError("f_values must be non-negative")
    branches = []
    for f in f_values:
        p = ModelParams(
            delta=params.delta, u=params.u, f=float(f), j_hop=params.j_hop,
            z=params.z, gamma=params.gamma,
        )
        branches.append(meanfield_roots(p))
    lo = hi = None
    if params.u > 0:
        order = np.argsort(f_values)
        fs = f_values[order]
        disc = np.array([_discriminant(params, f) for f in fs])
        for k in range(len(fs) - 1):
            if disc[k] <= 0 < disc[k + 1]:
                lo = _bisect_spinodal(params, fs[k], fs[k + 1])
            elif disc[k] > 0 >= disc[k + 1]:
                hi = _bisect_spinodal(params, fs[k], fs[k + 1])
    return SweepResult(
        f_values=f_values, branches=branches, spinodal_lower=lo, spinodal_upper=hi
    )
