"""Brute-force Lindblad master-equation integrator in a truncated Fock space.

Serves as the correctness oracle for the trajectory engine on 1-4 site
systems. The master equation is

    drho/dt = -i [H, rho] + (gamma/2) sum_j (2 a_j rho a_j^dag - {n_j, rho})

with H = sum_j (-delta*n_j + (u/2)*n_j*(n_j-1) + f*(a_j + a_j^dag))
        - j_hop * sum_bonds (a_j^dag a_k + a_k^dag a_j),

each bond counted once (doubled bonds of the 2x2 torus appear twice in the
bond list, i.e. with coupling 2*j_hop). The action of the Liouvillian is
applied matrix-free on the (dim x dim) density matrix; the dim^2-sized
superoperator is only ever materialized for the small-system null-space
cross-check.

Basis order: site-major, little-endian occupation — flat index
i = sum_s n_s * (n_max+1)^s, so site 0 is the fastest-varying digit.

Two equivalent implementations of the action are kept: a readable
scipy.sparse reference and a fused numba kernel driven by a table of
(coefficient, row-weight, column-weight, row-offset, column-offset) terms;
they are cross-checked against each other in the tests.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numba import njit, prange

from .model import LatticeSpec, ModelParams

__all__ = [
    "FockBasis",
    "DensityMatrix",
    "LiouvillianAction",
    "build_liouvillian_action",
    "EvolveResult",
    "evolve",
    "steady_state",
    "steady_state_nullspace",
    "expectation",
    "vacuum_rho",
    "fock_rho",
    "coherent_product_rho",
    "suggest_n_max",
    "CutoffError",
]

DEFAULT_DIM_CAP = 4096


class CutoffError(RuntimeError):
    """Raised when the Fock cutoff is too small for the reached populations."""


@dataclass(frozen=True)
class FockBasis:
    """Truncated product Fock space with a uniform per-site boson cutoff."""

    n_sites: int
    n_max: int

    def __post_init__(self):
        if self.n_sites < 1:
            raise ValueError("n_sites must be >= 1")
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")

    @property
    def dim(self) -> int:
        return (self.n_max + 1) ** self.n_sites

    def occupations(self, site: int) -> np.ndarray:
        """Occupation digit of ``site`` for every flat basis index."""
        d = self.n_max + 1
        idx = np.arange(self.dim)
        return (idx // d**site) % d


@dataclass
class DensityMatrix:
    """Dense density operator on a FockBasis."""

    data: np.ndarray
    basis: FockBasis
    time: float = 0.0

    def __post_init__(self):
        dim = self.basis.dim
        if self.data.shape != (dim, dim):
            raise ValueError(f"data shape {self.data.shape} != ({dim}, {dim})")
        self.data = np.ascontiguousarray(self.data, dtype=np.complex128)

    @property
    def trace(self) -> complex:
        return complex(np.trace(self.data))

    def hermiticity_defect(self) -> float:
        return float(np.abs(self.data - self.data.conj().T).max())

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(0.5 * (self.data + self.data.conj().T))[0])


def _site_ops(n_max: int):
    d = n_max + 1
    a = sp.diags(np.sqrt(np.arange(1, d)), 1, format="csr")
    return a, sp.identity(d, format="csr")


def _embed(op: sp.spmatrix, site: int, n_sites: int, n_max: int) -> sp.csr_matrix:
    """kron-embed a single-site operator; site 0 is the least-significant digit.

    kron(A, B) puts A on the most significant digits, so lower sites go on the
    right of the operator and higher sites on the left.
    """
    d = n_max + 1
    out = op
    if site > 0:
        out = sp.kron(out, sp.identity(d**site, format="csr"), format="csr")
    rest = n_sites - site - 1
    if rest > 0:
        out = sp.kron(sp.identity(d**rest, format="csr"), out, format="csr")
    return out.tocsr()


def _bond_list(lattice: LatticeSpec) -> list[tuple[int, int]]:
    """Each undirected bond once, with multiplicity for doubled wraps."""
    bonds = []
    nbr = lattice.neighbor_table
    for j in range(lattice.n_sites):
        for jp in nbr[j]:
            if j < int(jp):
                bonds.append((j, int(jp)))
    return bonds


@njit(parallel=True, fastmath=True, cache=True)
def _apply_kernel(rho, pdiag, ku_l, dr_l, kv_r, dc_r, ku_b, v_b, dr_b, dc_b, out):  # pragma: no cover - exercised via wrapper
    dim = rho.shape[0]
    for r in prange(dim):
        for c in range(dim):
            out[r, c] = pdiag[r, c] * rho[r, c]
        # left multiplications: column-independent weight, contiguous row AXPY
        for t in range(ku_l.shape[0]):
            coeff = ku_l[t, r]
            if coeff != 0.0:
                rr = r + dr_l[t]
                for c in range(dim):
                    out[r, c] += coeff * rho[rr, c]
        # right multiplications: row-independent weight
        for t in range(kv_r.shape[0]):
            dct = dc_r[t]
            for c in range(dim):
                vc = kv_r[t, c]
                if vc != 0.0:
                    out[r, c] += vc * rho[r, c + dct]
        # two-sided terms (loss recycling)
        for t in range(ku_b.shape[0]):
            coeff = ku_b[t, r]
            if coeff != 0.0:
                rr = r + dr_b[t]
                dct = dc_b[t]
                for c in range(dim):
                    vc = v_b[t, c]
                    if vc != 0.0:
                        out[r, c] += coeff * vc * rho[rr, c + dct]


@njit(parallel=True, fastmath=True, cache=True)
def _rk4_combine(rho, k1, k2, k3, k4, dt, out):  # pragma: no cover
    n = rho.shape[0]
    w = dt / 6.0
    for r in prange(n):
        for c in range(n):
            out[r, c] = rho[r, c] + w * (
                k1[r, c] + 2.0 * k2[r, c] + 2.0 * k3[r, c] + k4[r, c]
            )


@njit(parallel=True, fastmath=True, cache=True)
def _axpy(rho, k, a, out):  # pragma: no cover
    n = rho.shape[0]
    for r in prange(n):
        for c in range(n):
            out[r, c] = rho[r, c] + a * k[r, c]


class LiouvillianAction:
    """Matrix-free application of L to a density matrix.

    ``fast=True`` routes through the numba term-table kernel; the scipy.sparse
    reference (`apply_reference`) implements the same map and is used for
    cross-validation and as a fallback.
    """

    def __init__(self, params: ModelParams, lattice: LatticeSpec, basis: FockBasis,
                 fast: bool = True):
        if basis.n_sites != lattice.n_sites:
            raise ValueError("basis and lattice disagree on the number of sites")
        self.params = params
        self.lattice = lattice
        self.basis = basis
        self.fast = fast
        self._build()

    def _build(self):
        p = self.params
        basis = self.basis
        dim = basis.dim
        n_max = basis.n_max
        g = p.gamma

        occ = [basis.occupations(s).astype(np.float64) for s in range(basis.n_sites)]
        energy = np.zeros(dim)
        ntot = np.zeros(dim)
        for ns in occ:
            energy += -p.delta * ns + 0.5 * p.u * ns * (ns - 1.0)
            ntot += ns
        self._ntot = ntot
        # all number-conserving pieces in one elementwise factor
        self.pdiag = (-1j * (energy[:, None] - energy[None, :])
                      - 0.5 * g * (ntot[:, None] + ntot[None, :]))

        d = n_max + 1
        stride = [d**s for s in range(basis.n_sites)]
        kappas: list[complex] = []
        us: list[np.ndarray] = []
        vs: list[np.ndarray] = []
        drs: list[int] = []
        dcs: list[int] = []
        ones = np.ones(dim)

        def lower_w(s):  # weight of <r| a_s : sqrt(n+1), zero at the cutoff edge
            w = np.sqrt(occ[s] + 1.0)
            w[occ[s] >= n_max] = 0.0
            return w

        def raise_w(s):  # weight of <r| a_s^dag : sqrt(n)
            return np.sqrt(occ[s])

        def term(kappa, uvec, vvec, drow, dcol):
            kappas.append(kappa)
            us.append(uvec)
            vs.append(vvec)
            drs.append(drow)
            dcs.append(dcol)

        for s in range(basis.n_sites):
            st = stride[s]
            # drive: -i f [a_s + a_s^dag, rho]
            term(-1j * p.f, lower_w(s), ones, +st, 0)
            term(-1j * p.f, raise_w(s), ones, -st, 0)
            term(+1j * p.f, ones, raise_w(s), 0, -st)
            term(+1j * p.f, ones, lower_w(s), 0, +st)
            # loss recycling: gamma a_s rho a_s^dag
            term(g, lower_w(s), lower_w(s), +st, +st)

        for (j, k) in _bond_list(self.lattice):
            sj, sk = stride[j], stride[k]
            # hopping: +i j_hop [a_j^dag a_k + a_k^dag a_j, rho]
            term(+1j * p.j_hop, raise_w(j) * lower_w(k), ones, sk - sj, 0)
            term(+1j * p.j_hop, raise_w(k) * lower_w(j), ones, sj - sk, 0)
            term(-1j * p.j_hop, ones, raise_w(j) * lower_w(k), 0, sk - sj)
            term(-1j * p.j_hop, ones, raise_w(k) * lower_w(j), 0, sj - sk)

        # split into the kernel's term classes (left-only / right-only / both)
        left, right, both = [], [], []
        for kap, uvec, vvec, drow, dcol in zip(kappas, us, vs, drs, dcs):
            if vvec is ones:
                left.append((kap * uvec, drow))
            elif uvec is ones:
                right.append((kap * vvec, dcol))
            else:
                both.append((kap * uvec, vvec, drow, dcol))

        def pack(rows, width, dtype):
            if rows:
                return np.ascontiguousarray(np.stack(rows).astype(dtype))
            return np.zeros((0, width), dtype=dtype)

        self.ku_l = pack([t[0] for t in left], dim, np.complex128)
        self.dr_l = np.array([t[1] for t in left], dtype=np.int64)
        self.kv_r = pack([t[0] for t in right], dim, np.complex128)
        self.dc_r = np.array([t[1] for t in right], dtype=np.int64)
        self.ku_b = pack([t[0] for t in both], dim, np.complex128)
        self.v_b = pack([t[1] for t in both], dim, np.float64)
        self.dr_b = np.array([t[2] for t in both], dtype=np.int64)
        self.dc_b = np.array([t[3] for t in both], dtype=np.int64)
        self._buffers: list[np.ndarray] = []

        # sparse operators for the reference path and expectations
        a1, _ = _site_ops(n_max)
        self.a_ops = [_embed(a1, s, basis.n_sites, n_max) for s in range(basis.n_sites)]
        h = sp.csr_matrix((dim, dim), dtype=np.complex128)
        for s in range(basis.n_sites):
            ad = self.a_ops[s].conj().T.tocsr()
            h = h + p.f * (self.a_ops[s] + ad)
        for (j, k) in _bond_list(self.lattice):
            hop = self.a_ops[j].conj().T @ self.a_ops[k]
            h = h - p.j_hop * (hop + hop.conj().T)
        h = h + sp.diags(energy)
        self.h = h.tocsr()

    @property
    def dim(self) -> int:
        return self.basis.dim

    def apply_reference(self, rho: np.ndarray) -> np.ndarray:
        g = self.params.gamma
        out = -1j * (self.h @ rho - rho @ self.h)
        out -= 0.5 * g * (self._ntot[:, None] * rho + rho * self._ntot[None, :])
        for a in self.a_ops:
            out += g * (a @ rho @ a.conj().T)
        return np.asarray(out)

    def __call__(self, rho: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
        if not self.fast:
            return self.apply_reference(rho)
        if out is None:
            out = np.empty_like(rho)
        _apply_kernel(rho, self.pdiag, self.ku_l, self.dr_l, self.kv_r,
                      self.dc_r, self.ku_b, self.v_b, self.dr_b, self.dc_b, out)
        return out

    def _scratch(self, n: int) -> list[np.ndarray]:
        while len(self._buffers) < n:
            self._buffers.append(
                np.empty((self.dim, self.dim), dtype=np.complex128)
            )
        return self._buffers[:n]

    def spectral_radius_estimate(self, iterations: int = 12, seed: int = 7) -> float:
        """Power-iteration bound used to pick a stable RK4 step."""
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((self.dim, self.dim)) + 1j * rng.standard_normal(
            (self.dim, self.dim)
        )
        x /= np.linalg.norm(x)
        r = 1.0
        for _ in range(iterations):
            y = self(x)
            r = float(np.linalg.norm(y))
            if r == 0.0:
                return 1.0
            x = y / r
        return r


def build_liouvillian_action(
    params: ModelParams,
    lattice: LatticeSpec,
    basis: FockBasis,
    dim_cap: int = DEFAULT_DIM_CAP,
    fast: bool = True,
) -> LiouvillianAction:
    """Construct the matrix-free Liouvillian, guarding the Hilbert dimension."""
    if basis.dim > dim_cap:
        raise ValueError(
            f"Hilbert dimension {basis.dim} exceeds the cap {dim_cap}; "
            "reduce n_max or the number of sites"
        )
    return LiouvillianAction(params, lattice, basis, fast=fast)


def vacuum_rho(basis: FockBasis) -> DensityMatrix:
    rho = np.zeros((basis.dim, basis.dim), dtype=np.complex128)
    rho[0, 0] = 1.0
    return DensityMatrix(data=rho, basis=basis)


def fock_rho(basis: FockBasis, occupations) -> DensityMatrix:
    occupations = np.asarray(occupations, dtype=int)
    if occupations.shape != (basis.n_sites,):
        raise ValueError("one occupation per site required")
    if np.any(occupations < 0) or np.any(occupations > basis.n_max):
        raise ValueError("occupation outside the truncated space")
    d = basis.n_max + 1
    idx = int(np.sum(occupations * d ** np.arange(basis.n_sites)))
    rho = np.zeros((basis.dim, basis.dim), dtype=np.complex128)
    rho[idx, idx] = 1.0
    return DensityMatrix(data=rho, basis=basis)


def coherent_product_rho(basis: FockBasis, alpha) -> DensityMatrix:
    """Product of coherent states |alpha_s> (renormalized in the truncation)."""
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.complex128), (basis.n_sites,))
    d = basis.n_max + 1
    psi = np.ones(1, dtype=np.complex128)
    ns = np.arange(d)
    log_fact = np.concatenate([[0.0], np.cumsum(np.log(np.arange(1, d)))])
    for s in range(basis.n_sites - 1, -1, -1):
        a = alpha[s]
        with np.errstate(divide="ignore", invalid="ignore"):
            amps = np.exp(-0.5 * np.abs(a) ** 2 + ns * np.log(a) - 0.5 * log_fact
                          ) if a != 0 else np.eye(d, 1).ravel().astype(np.complex128)
        amps = np.where(np.isfinite(amps), amps, 0.0)
        psi = np.kron(psi, amps)
    psi /= np.linalg.norm(psi)
    return DensityMatrix(data=np.outer(psi, psi.conj()), basis=basis)


@dataclass
class EvolveResult:
    """Fixed-step RK4 evolution record."""

    times: np.ndarray
    population: np.ndarray      # site-averaged <n> at each recorded time
    trace_error: np.ndarray     # |tr(rho) - 1| at each recorded time
    rho: DensityMatrix
    snapshots: list[DensityMatrix] = field(default_factory=list)
    residual: float = np.nan    # entrywise 1-norm of L(rho) at the end


def _rk4_step(action: LiouvillianAction, rho: np.ndarray, dt: float) -> np.ndarray:
    if not action.fast:
        k1 = action(rho)
        k2 = action(rho + 0.5 * dt * k1)
        k3 = action(rho + 0.5 * dt * k2)
        k4 = action(rho + dt * k3)
        return rho + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    k1, k2, k3, k4, tmp, res = action._scratch(6)
    action(rho, out=k1)
    _axpy(rho, k1, 0.5 * dt, tmp)
    action(tmp, out=k2)
    _axpy(rho, k2, 0.5 * dt, tmp)
    action(tmp, out=k3)
    _axpy(rho, k3, dt, tmp)
    action(tmp, out=k4)
    # res may alias the incoming rho (step chaining); the combine is pointwise
    _rk4_combine(rho, k1, k2, k3, k4, dt, res)
    return res


def _population_of(action: LiouvillianAction, rho: np.ndarray) -> float:
    diag = rho.diagonal().real
    return float(np.dot(action._ntot, diag) / action.basis.n_sites)


def _check_cutoff(action: LiouvillianAction, rho: np.ndarray):
    basis = action.basis
    diag = rho.diagonal().real
    for s in range(basis.n_sites):
        occ = basis.occupations(s)
        mean = float(np.dot(occ, diag))
        if mean > basis.n_max - 2:
            raise CutoffError(
                f"site {s} population {mean:.2f} within 2 of the cutoff "
                f"n_max={basis.n_max}; increase the cutoff"
            )
        edge = float(diag[occ == basis.n_max].sum())
        if edge > 1e-6:
            warnings.warn(
                f"probability {edge:.2e} on the n_max={basis.n_max} edge of "
                f"site {s}; cutoff may be too small",
                RuntimeWarning,
                stacklevel=3,
            )


def evolve(
    action: LiouvillianAction,
    rho0: DensityMatrix,
    t_end: float,
    dt: float | None = None,
    record_stride: int = 1,
    snapshot_stride: int = 0,
    trace_tol: float = 1e-6,
    check_cutoff: bool = True,
) -> EvolveResult:
    """Classical fixed-step RK4 integration of the master equation.

    The trace drift is monitored, never renormalized; a deviation beyond
    ``trace_tol`` raises (step size too large). ``dt=None`` picks
    2.5 / (power-iteration spectral radius).
    """
    if dt is None:
        dt = 2.5 / action.spectral_radius_estimate()
    n_steps = int(np.ceil(t_end / dt - 1e-9))
    n_steps = max(n_steps, 1)
    rho = rho0.data.copy()
    times = [0.0]
    pops = [_population_of(action, rho)]
    terr = [abs(np.trace(rho).real - 1.0)]
    snaps: list[DensityMatrix] = []
    for k in range(1, n_steps + 1):
        rho = _rk4_step(action, rho, dt)
        t = k * dt
        if k % record_stride == 0 or k == n_steps:
            times.append(t)
            pops.append(_population_of(action, rho))
            err = abs(complex(np.trace(rho)).real - 1.0)
            terr.append(err)
            if err > trace_tol:
                raise RuntimeError(
                    f"trace deviation {err:.2e} > {trace_tol:.1e} at t={t:.3f}; "
                    "reduce dt"
                )
        if snapshot_stride and k % snapshot_stride == 0:
            snaps.append(DensityMatrix(data=rho.copy(), basis=action.basis, time=t))
    if check_cutoff:
        _check_cutoff(action, rho)
    res = float(np.abs(action(rho)).sum())
    return EvolveResult(
        times=np.array(times),
        population=np.array(pops),
        trace_error=np.array(terr),
        rho=DensityMatrix(data=rho.copy(), basis=action.basis, time=n_steps * dt),
        snapshots=snaps,
        residual=res,
    )


def steady_state(
    action: LiouvillianAction,
    tol: float = 1e-9,
    dt: float | None = None,
    rho0: DensityMatrix | None = None,
    max_steps: int = 2_000_000,
    check_every: int = 50,
    trace_tol: float = 1e-6,
    check_cutoff: bool = True,
    population_tol: float | None = None,
) -> tuple[DensityMatrix, dict]:
    """Evolve until the entrywise 1-norm of d(rho)/dt drops below ``tol``.

    Starts from the vacuum unless ``rho0`` is given (a coherent state at the
    mean-field amplitude converges much faster; the fixed point is unique, so
    the start only affects runtime).

    ``population_tol`` adds an observable-level stopping rule for large bases
    where the summed residual norm is impractically strict: once the
    population decays geometrically between checks, the remaining error is
    extrapolated as |Delta n| * r / (1 - r) from the ratio r of successive
    decrements, and the run stops when that bound (twice in a row, with the
    residual still shrinking) is below ``population_tol``. The extrapolated
    bound is returned in the info dict.
    """
    if dt is None:
        dt = 2.5 / action.spectral_radius_estimate()
    rho = (rho0.data if rho0 is not None else vacuum_rho(action.basis).data).copy()
    steps = 0
    res = float(np.abs(action(rho)).sum())
    prev_res = np.inf
    pops = [_population_of(action, rho)]
    n_err = np.inf
    settled = 0
    while res > tol:
        if steps >= max_steps:
            raise RuntimeError(
                f"steady state not reached in {max_steps} steps "
                f"(residual {res:.3e} > tol {tol:.1e})"
            )
        for _ in range(check_every):
            rho = _rk4_step(action, rho, dt)
        steps += check_every
        terr = abs(complex(np.trace(rho)).real - 1.0)
        if terr > trace_tol:
            raise RuntimeError(
                f"trace deviation {terr:.2e} > {trace_tol:.1e} during the "
                "steady-state evolution; reduce dt"
            )
        prev_res, res = res, float(np.abs(action(rho)).sum())
        pops.append(_population_of(action, rho))
        if population_tol is not None and len(pops) >= 3:
            d1 = pops[-1] - pops[-2]
            d0 = pops[-2] - pops[-3]
            if d0 != 0.0 and res < prev_res:
                r = d1 / d0
                if 0.0 < r < 0.95:
                    n_err = abs(d1) * r / (1.0 - r)
                    settled = settled + 1 if n_err < population_tol else 0
                    if settled >= 2:
                        break
    if check_cutoff:
        _check_cutoff(action, rho)
    return (
        DensityMatrix(data=rho.copy(), basis=action.basis, time=steps * dt),
        {"steps": steps, "dt": dt, "residual": res, "population_error": n_err},
    )


def steady_state_nullspace(
    action: LiouvillianAction, dim_cap: int = 512
) -> DensityMatrix:
    """Direct null-space solve of the vectorized Liouvillian (cross-check only).

    Materializes the sparse dim^2 x dim^2 superoperator, replaces one row by
    the trace constraint, and solves. Guarded to small dimensions.
    """
    dim = action.dim
    if dim > dim_cap:
        raise ValueError(f"null-space solve limited to dim <= {dim_cap}, got {dim}")
    g = action.params.gamma
    eye = sp.identity(dim, format="csr")
    h = action.h
    lv = -1j * (sp.kron(h, eye) - sp.kron(eye, h.T))
    ntot = sp.diags(action._ntot)
    lv = lv - 0.5 * g * (sp.kron(ntot, eye) + sp.kron(eye, ntot))
    for a in action.a_ops:
        lv = lv + g * sp.kron(a, a.conj())
    lv = lv.tolil()
    trace_row = np.zeros(dim * dim)
    trace_row[np.arange(dim) * (dim + 1)] = 1.0
    lv[0] = trace_row
    rhs = np.zeros(dim * dim, dtype=np.complex128)
    rhs[0] = 1.0
    x = sp.linalg.spsolve(lv.tocsc(), rhs)
    rho = x.reshape(dim, dim)
    rho = 0.5 * (rho + rho.conj().T)
    return DensityMatrix(data=rho, basis=action.basis)


def expectation(rho: DensityMatrix, observable: str) -> float:
    """Trace formulas for the supported diagonal observables."""
    basis = rho.basis
    diag = rho.data.diagonal().real
    occ = [basis.occupations(s) for s in range(basis.n_sites)]
    if observable == "population":
        return float(
            np.mean([np.dot(o, diag) for o in occ])
        )
    if observable == "g2":
        num = np.mean([np.dot(o * (o - 1.0), diag) for o in occ])
        den = np.mean([np.dot(o, diag) for o in occ]) ** 2
        if den <= 0:
            raise ValueError("g2 undefined at zero population")
        return float(num / den)
    if observable == "parity":
        sign = np.ones(basis.dim)
        for o in occ:
            sign *= np.where(o % 2 == 0, 1.0, -1.0)
        return float(np.dot(sign, diag))
    raise ValueError(f"unknown observable {observable!r}")


def suggest_n_max(n_estimate: float) -> int:
    """Cutoff heuristic: keep the coherent 6-sigma tail inside the basis."""
    return int(np.ceil(n_estimate + 6.0 * np.sqrt(max(n_estimate, 1.0)))) + 1
