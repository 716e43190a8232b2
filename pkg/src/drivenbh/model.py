"""Model definition for the coherently driven, dissipative Bose-Hubbard lattice.

The system is a lattice of nonlinear boson modes with on-site interaction ``u``,
uniform coherent drive ``f`` (rotating frame, detuning ``delta``), nearest-neighbor
hopping ``j_hop`` and uniform single-boson loss ``gamma``. All frequencies are
expressed in units of ``gamma`` (``gamma = 1`` internally) and times in units of
``1/gamma``.

The stochastic field equation integrated by the engine reads, per site j,

    d(alpha_j)/dt = [i*(delta - u*(|alpha_j|^2 - 1)) - gamma/2] * alpha_j
                    + i*j_hop * sum_{j' in nn(j)} alpha_{j'}
                    - i*f
                    + sqrt(gamma/2) * chi_j(t)

with complex white noise <chi chi*> = delta(t-t'), <chi chi> = 0. The damping
sits outside the imaginary bracket (gamma is a loss rate, not a frequency
shift); the phase convention (+i*delta, -i*f) is the complex conjugate of the
(-i*delta, +i*f) choice and carries identical |alpha| statistics. The ``- 1``
in the nonlinearity is the symmetric-ordering correction; it is what makes
trajectory averages of this equation agree with the exact master equation at
small ``u`` (see the lindblad module and the benchmark tests).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ModelParams",
    "LatticeSpec",
    "FieldState",
    "build_lattice",
    "drift",
    "drift_batch",
]


@dataclass(frozen=True)
class ModelParams:
    """Physical constants of the driven-dissipative Bose-Hubbard model.

    All rates are in units of ``gamma``; ``z`` is the lattice coordination
    number and must match the lattice the parameters are used with.
    """

    delta: float
    u: float
    f: float
    j_hop: float
    z: int
    gamma: float = 1.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.u < 0:
            raise ValueError(f"u must be non-negative, got {self.u}")
        if self.f < 0:
            raise ValueError(f"f must be non-negative (phase convention), got {self.f}")
        if self.z < 0:
            raise ValueError(f"z must be a non-negative integer, got {self.z}")

    @property
    def zj(self) -> float:
        """Coordination number times hopping; the only combination entering mean-field."""
        return self.z * self.j_hop


@dataclass(frozen=True)
class LatticeSpec:
    """Periodic lattice topology as an explicit neighbor table.

    ``neighbor_table`` has shape (n_sites, z); entry [j, k] is the site index of
    the k-th neighbor of site j. Multi-edges (the degenerate 2x2 torus wrap)
    appear as repeated entries, so a bond of multiplicity m contributes m times
    to neighbor sums. Torus sites are indexed row-major: (row, col) -> row*L + col.
    """

    kind: str
    L: int
    n_sites: int
    z: int
    neighbor_table: np.ndarray = field(repr=False)
    adjacency: np.ndarray = field(repr=False, init=False, default=None)

    def __post_init__(self):
        nbr = np.asarray(self.neighbor_table, dtype=np.int64)
        if nbr.shape != (self.n_sites, self.z):
            raise ValueError(
                f"neighbor_table shape {nbr.shape} != (n_sites={self.n_sites}, z={self.z})"
            )
        object.__setattr__(self, "neighbor_table", nbr)
        nbr.setflags(write=False)
        # symmetry of the neighbor relation, counting multiplicity
        counts: dict[tuple[int, int], int] = {}
        for j in range(self.n_sites):
            for jp in nbr[j]:
                counts[(j, int(jp))] = counts.get((j, int(jp)), 0) + 1
        for (j, jp), m in counts.items():
            if counts.get((jp, j), 0) != m:
                raise ValueError(f"neighbor relation not symmetric at sites {j}, {jp}")
        adj = np.zeros((self.n_sites, self.n_sites), dtype=np.complex128)
        for (j, jp), m in counts.items():
            adj[j, jp] = m
        adj.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)


def build_lattice(kind: str, L: int) -> LatticeSpec:
    """Build a periodic lattice: 1D ring, 2D torus, two-site dimer, or one site.

    Ring requires L >= 3 (the L=2 periodic wrap would double-count the single
    bond; use kind="dimer" for a two-site system). Torus requires L >= 2; at
    L=2 the periodic wrap produces doubled bonds and the neighbor lists contain
    duplicates, which is the honest 2x2 torus with z=4. "single" (L=1) is the
    isolated driven cavity used by the analytic benchmarks.
    """
    if L < 1 or int(L) != L:
        raise ValueError(f"L must be a positive integer, got {L}")
    L = int(L)
    if kind == "ring":
        if L < 3:
            raise ValueError(
                f"ring requires L >= 3 (degenerate periodic wrap at L={L}; "
                "use kind='dimer' for a two-site system)"
            )
        sites = np.arange(L)
        nbr = np.stack([(sites + 1) % L, (sites - 1) % L], axis=1)
        return LatticeSpec(kind="ring", L=L, n_sites=L, z=2, neighbor_table=nbr)
    if kind == "torus":
        if L < 2:
            raise ValueError(f"torus requires L >= 2, got L={L}")
        idx = np.arange(L * L).reshape(L, L)  # [row, col]
        up = np.roll(idx, 1, axis=0)
        down = np.roll(idx, -1, axis=0)
        left = np.roll(idx, 1, axis=1)
        right = np.roll(idx, -1, axis=1)
        nbr = np.stack(
            [down.ravel(), up.ravel(), right.ravel(), left.ravel()], axis=1
        )
        return LatticeSpec(kind="torus", L=L, n_sites=L * L, z=4, neighbor_table=nbr)
    if kind == "dimer":
        if L != 2:
            raise ValueError(f"dimer has exactly 2 sites, got L={L}")
        nbr = np.array([[1], [0]], dtype=np.int64)
        return LatticeSpec(kind="dimer", L=2, n_sites=2, z=1, neighbor_table=nbr)
    if kind == "single":
        if L != 1:
            raise ValueError(f"single has exactly 1 site, got L={L}")
        nbr = np.zeros((1, 0), dtype=np.int64)
        return LatticeSpec(kind="single", L=1, n_sites=1, z=0, neighbor_table=nbr)
    raise ValueError(
        f"unknown lattice kind {kind!r} (expected ring, torus, dimer or single)"
    )


@dataclass(frozen=True)
class FieldState:
    """One trajectory's complex field amplitudes at a point in time."""

    amplitudes: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        amp = np.asarray(self.amplitudes, dtype=np.complex128)
        if amp.ndim != 1:
            raise ValueError(f"amplitudes must be 1D, got shape {amp.shape}")
        if not np.all(np.isfinite(amp)):
            raise ValueError("amplitudes must be finite")
        object.__setattr__(self, "amplitudes", amp)
        amp.setflags(write=False)

    @property
    def n_sites(self) -> int:
        return self.amplitudes.shape[0]


def drift_batch(params: ModelParams, lattice: LatticeSpec, alphas: np.ndarray) -> np.ndarray:
    """Deterministic part of the field equation for a (batch, n_sites) array.

    This is the single implementation of the drift; ``drift`` and the engine
    both call it.
    """
    g = params.gamma
    n = alphas.real**2 + alphas.imag**2
    # the adjacency is symmetric (with bond multiplicities), so the neighbor
    # sum over the table equals a right-multiplication by it
    nbr_sum = alphas @ lattice.adjacency
    return (
        (1j * (params.delta - params.u * (n - 1.0)) - 0.5 * g) * alphas
        + 1j * params.j_hop * nbr_sum
        - 1j * params.f
    )


def drift(params: ModelParams, lattice: LatticeSpec, state: FieldState) -> np.ndarray:
    """d(alpha)/dt deterministic part for a single FieldState.

    Raises ValueError on non-finite amplitudes (a diverged trajectory) and on a
    params/lattice coordination mismatch.
    """
    if params.z != lattice.z:
        raise ValueError(f"params.z={params.z} does not match lattice z={lattice.z}")
    amp = state.amplitudes
    if amp.shape[0] != lattice.n_sites:
        raise ValueError(
            f"state has {amp.shape[0]} sites, lattice has {lattice.n_sites}"
        )
    if not np.all(np.isfinite(amp)):
        raise ValueError("non-finite amplitude: trajectory diverged")
    return drift_batch(params, lattice, amp[np.newaxis, :])[0]
