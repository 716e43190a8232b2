"""Ensemble integrator for the truncated-Wigner Langevin equations.

Trajectories evolve under the drift defined in :mod:`drivenbh.model` plus
additive complex Gaussian noise sqrt(gamma/2)*chi(t). Per step and site the
noise increment is dW = sqrt(dt/2)*(xi1 + i*xi2) with independent standard
normals, so <dW dW*> = dt and <dW dW> = 0.

Reproducibility: trajectories are integrated in fixed-size batches, each batch
driven by its own counter-based Philox stream keyed on (seed, context, batch
index). Trajectory i lives in batch i // batch_size, so the full ensemble is a
pure function of (seed, config, params, lattice) and is bit-identical for any
worker count; threads only distribute whole batches. Changing batch_size picks
a different (equally valid) noise realization, exactly like changing dt.

Ensemble reduction: per-batch partial sums are accumulated with numpy's
pairwise summation and combined in batch order, keeping floating-point
reduction error negligible up to 1e6 trajectories.

Diverged trajectories (non-finite amplitudes or populations beyond a cap) are
counted and excluded retroactively: a batch containing divergences is re-run
from the same Philox stream with the bad rows masked out of every accumulator.
The run fails if more than ``max_divergence_fraction`` of trajectories diverge
or if none survive.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import FieldState, LatticeSpec, ModelParams, drift_batch

__all__ = [
    "EngineConfig",
    "TrajectoryRecord",
    "EnsembleResult",
    "EngineError",
    "sample_initial",
    "step",
    "run_ensemble",
    "noise_increments",
]

_DIVERGENCE_CAP = 1e10  # |alpha|^2 beyond this counts as diverged
_MASK32 = (1 << 32) - 1
_MASK64 = (1 << 64) - 1


class EngineError(RuntimeError):
    """Raised when an ensemble run cannot produce valid averages."""


@dataclass(frozen=True)
class EngineConfig:
    """Integration settings for one ensemble run.

    ``initial_state`` is one of "wigner_vacuum", "coherent" (with ``alpha0``)
    or "custom" (with ``custom_initial``, used verbatim without added noise).
    ``context`` distinguishes RNG streams of different points within one sweep.
    """

    dt: float
    t_end: float
    n_traj: int
    seed: int
    record_stride: int = 1
    scheme: str = "heun"
    initial_state: str = "wigner_vacuum"
    alpha0: complex = 0.0 + 0.0j
    custom_initial: np.ndarray | None = None
    batch_size: int = 512
    noise: bool = True
    store_trajectory_means: bool = False
    n_full_records: int = 1
    max_divergence_fraction: float = 1e-3
    context: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.t_end < self.dt:
            raise ValueError(f"t_end ({self.t_end}) must be >= dt ({self.dt})")
        if self.n_traj < 1:
            raise ValueError(f"n_traj must be >= 1, got {self.n_traj}")
        if self.record_stride < 1:
            raise ValueError(f"record_stride must be >= 1, got {self.record_stride}")
        if self.scheme not in ("heun", "euler_maruyama"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.initial_state not in ("wigner_vacuum", "coherent", "custom"):
            raise ValueError(f"unknown initial_state {self.initial_state!r}")
        if self.initial_state == "custom" and self.custom_initial is None:
            raise ValueError("initial_state='custom' requires custom_initial")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class TrajectoryRecord:
    """Raw Wigner time series of a single trajectory (no ordering corrections)."""

    times: np.ndarray
    site_population_w: np.ndarray      # (n_times, n_sites) |alpha_j|^2
    site_avg_population_w: np.ndarray  # (n_times,)
    final_state: FieldState


@dataclass(frozen=True)
class EnsembleResult:
    """Ensemble moment summary over the recorded time grid.

    All moments are raw Wigner (symmetric-ordering) averages; physical
    observables are derived in :mod:`drivenbh.observables`. ``nbar`` is the
    site-averaged population |alpha|^2, ``qbar`` the site-averaged |alpha|^4,
    ``b2`` the population |b0|^2 of the k=0 collective mode b0 = sum_j alpha_j
    / sqrt(N). Standard errors are over trajectories; ``cov_*`` are sample
    covariances over trajectories used for error propagation.
    """

    times: np.ndarray
    n_traj: int
    n_requested: int
    diverged: int
    pop_site_mean: np.ndarray  # (n_times, n_sites)
    nbar_mean: np.ndarray
    nbar_se: np.ndarray
    qbar_mean: np.ndarray
    qbar_se: np.ndarray
    b2_mean: np.ndarray
    b2_se: np.ndarray
    cov_nbar_qbar: np.ndarray
    cov_nbar_b2: np.ndarray
    batch_nbar: np.ndarray     # (n_batches, n_times) per-batch means
    batch_sizes: np.ndarray
    traj_nbar: np.ndarray | None
    records: list[TrajectoryRecord] = field(repr=False, default_factory=list)
    n_sites: int = 0


def batch_rng(seed: int, context: int, batch: int) -> np.random.Generator:
    """Counter-based stream for one batch: Philox keyed on (seed, context, batch)."""
    key = np.array(
        [seed & _MASK64, ((context & _MASK32) << 32) | (batch & _MASK32)],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))


def noise_increments(rng: np.random.Generator, dt: float, shape) -> np.ndarray:
    """Complex Wiener increments dW with <dW dW*> = dt, <dW dW> = 0."""
    xi = rng.standard_normal(size=tuple(shape) + (2,))
    dw = xi.view(np.complex128)[..., 0]
    dw *= np.sqrt(dt / 2.0)
    return dw


def sample_initial(
    kind: str,
    lattice: LatticeSpec,
    rng: np.random.Generator,
    alpha0: complex = 0.0 + 0.0j,
    batch: int = 1,
    custom: np.ndarray | None = None,
) -> np.ndarray:
    """Draw (batch, n_sites) initial amplitudes.

    The Wigner vacuum is the complex Gaussian alpha = (xi1 + i*xi2)/2 with
    <|alpha|^2> = 1/2; a coherent state adds alpha0 to that cloud; "custom"
    replicates the given amplitudes verbatim (no noise).
    """
    n = lattice.n_sites
    if kind == "custom":
        if custom is None:
            raise ValueError("custom initial state requires an amplitude array")
        amp = np.asarray(custom, dtype=np.complex128)
        if amp.shape != (n,):
            raise ValueError(f"custom initial shape {amp.shape} != ({n},)")
        return np.tile(amp, (batch, 1))
    xi = rng.standard_normal(size=(2, batch, n))
    vac = 0.5 * (xi[0] + 1j * xi[1])
    if kind == "wigner_vacuum":
        return vac
    if kind == "coherent":
        return alpha0 + vac
    raise ValueError(f"unknown initial state kind {kind!r}")


def _step_batch(
    alpha: np.ndarray,
    params: ModelParams,
    lattice: LatticeSpec,
    dt: float,
    scheme: str,
    dw: np.ndarray | None,
) -> np.ndarray:
    """One integration step on a (batch, n_sites) array; dw is the pre-drawn noise."""
    noise = 0.0 if dw is None else np.sqrt(params.gamma / 2.0) * dw
    d1 = drift_batch(params, lattice, alpha)
    if scheme == "euler_maruyama":
        return alpha + d1 * dt + noise
    # heun: predictor-corrector on the drift; the noise is additive, so it is
    # added once and Ito and Stratonovich readings coincide
    pred = alpha + d1 * dt + noise
    d2 = drift_batch(params, lattice, pred)
    return alpha + 0.5 * dt * (d1 + d2) + noise


def step(
    state: FieldState,
    params: ModelParams,
    lattice: LatticeSpec,
    dt: float,
    rng: np.random.Generator,
    scheme: str = "heun",
    noise: bool = True,
) -> FieldState:
    """Advance a single trajectory by one step (convenience wrapper)."""
    alpha = state.amplitudes[np.newaxis, :]
    dw = noise_increments(rng, dt, alpha.shape) if noise else None
    out = _step_batch(alpha, params, lattice, dt, scheme, dw)[0]
    if not np.all(np.isfinite(out)):
        raise EngineError("trajectory diverged (non-finite amplitude)")
    return FieldState(amplitudes=out, time=state.time + dt)


def _time_grid(config: EngineConfig) -> tuple[int, int, np.ndarray]:
    """Number of steps (a multiple of record_stride), stride, recorded times."""
    stride = config.record_stride
    n_steps = int(np.ceil(config.t_end / config.dt - 1e-9))
    n_steps = ((n_steps + stride - 1) // stride) * stride
    n_rec = n_steps // stride + 1
    times = config.dt * stride * np.arange(n_rec)
    return n_steps, stride, times


def _run_batch(
    params: ModelParams,
    lattice: LatticeSpec,
    config: EngineConfig,
    batch_index: int,
    rows: int,
    n_record_rows: int,
    excluded: np.ndarray | None = None,
):
    """Integrate one batch; returns accumulators and the diverged-row mask.

    ``excluded`` marks rows whose contributions are skipped (second pass after
    a divergence). The Philox stream is fully replayed either way, so both
    passes see identical noise.
    """
    n_steps, stride, times = _time_grid(config)
    n_rec = times.shape[0]
    n = lattice.n_sites
    rng = batch_rng(config.seed, config.context, batch_index)
    alpha = sample_initial(
        config.initial_state, lattice, rng,
        alpha0=config.alpha0, batch=rows, custom=config.custom_initial,
    )
    ok = np.ones(rows, dtype=bool)
    diverged_at = np.full(rows, -1, dtype=np.int64)

    series_n = np.empty((rows, n_rec))
    series_q = np.empty((rows, n_rec))
    series_b2 = np.empty((rows, n_rec))
    pop_site_sum = np.zeros((n_rec, n))
    site_series = (
        np.empty((n_record_rows, n_rec, n)) if n_record_rows > 0 else None
    )
    include = None if excluded is None else ~excluded
    inv_sqrt_n = 1.0 / np.sqrt(n)

    def record(k_rec: int):
        # divergence is detected on the record grid; a blown-up row is zeroed
        # so it keeps integrating harmlessly, and the caller re-runs the batch
        # with the row masked out of every accumulator
        pop = alpha.real**2 + alpha.imag**2
        bad = ~(np.isfinite(pop).all(axis=1) & (pop.max(axis=1, initial=0.0) < _DIVERGENCE_CAP))
        newly = bad & ok
        if np.any(newly):
            diverged_at[newly] = k_rec
            ok[newly] = False
            alpha[newly] = 0.0
            pop[newly] = 0.0
        series_n[:, k_rec] = pop.mean(axis=1)
        series_q[:, k_rec] = (pop * pop).mean(axis=1)
        b0 = alpha.sum(axis=1) * inv_sqrt_n
        series_b2[:, k_rec] = b0.real**2 + b0.imag**2
        keep = ok if include is None else include
        pop_site_sum[k_rec] = pop[keep].sum(axis=0)
        if site_series is not None:
            site_series[:, k_rec, :] = pop[:n_record_rows]

    with np.errstate(over="ignore", invalid="ignore"):
        record(0)
        for k in range(1, n_steps + 1):
            dw = noise_increments(rng, config.dt, alpha.shape) if config.noise else None
            alpha = _step_batch(alpha, params, lattice, config.dt, config.scheme, dw)
            if k % stride == 0:
                record(k // stride)

    final_alpha = alpha
    return {
        "ok": ok,
        "diverged_at": diverged_at,
        "series_n": series_n,
        "series_q": series_q,
        "series_b2": series_b2,
        "pop_site_sum": pop_site_sum,
        "site_series": site_series,
        "final_alpha": final_alpha,
        "times": times,
    }


def run_ensemble(
    params: ModelParams,
    lattice: LatticeSpec,
    config: EngineConfig,
    threads: int = 1,
) -> EnsembleResult:
    """Integrate ``config.n_traj`` trajectories and reduce the ensemble moments."""
    if params.z != lattice.z:
        raise ValueError(f"params.z={params.z} does not match lattice z={lattice.z}")
    n_steps, stride, times = _time_grid(config)
    n_rec = times.shape[0]
    n = lattice.n_sites
    bsz = config.batch_size
    n_batches = (config.n_traj + bsz - 1) // bsz
    row_counts = [min(bsz, config.n_traj - b * bsz) for b in range(n_batches)]
    n_full = min(config.n_full_records, config.n_traj)

    def run_one(b: int):
        rows = row_counts[b]
        rec_rows = min(n_full, rows) if b == 0 else 0
        out = _run_batch(params, lattice, config, b, rows, rec_rows)
        if not np.all(out["ok"]):
            out = _run_batch(
                params, lattice, config, b, rows, rec_rows,
                excluded=~out["ok"],
            )
        return out

    if threads > 1 and n_batches > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(run_one, range(n_batches)))
    else:
        outs = [run_one(b) for b in range(n_batches)]

    diverged = int(sum((~o["ok"]).sum() for o in outs))
    kept = config.n_traj - diverged
    if kept == 0:
        raise EngineError("all trajectories diverged")
    if diverged > config.max_divergence_fraction * config.n_traj:
        raise EngineError(
            f"{diverged}/{config.n_traj} trajectories diverged "
            f"(> {config.max_divergence_fraction:.1%} allowed); reduce dt"
        )

    def stat_sums(key: str, fn):
        return np.sum(np.stack([fn(o[key][o["ok"]]) for o in outs]), axis=0)

    s_n = stat_sums("series_n", lambda x: x.sum(axis=0))
    s_n2 = stat_sums("series_n", lambda x: (x * x).sum(axis=0))
    s_q = stat_sums("series_q", lambda x: x.sum(axis=0))
    s_q2 = stat_sums("series_q", lambda x: (x * x).sum(axis=0))
    s_b2 = stat_sums("series_b2", lambda x: x.sum(axis=0))
    s_b2sq = stat_sums("series_b2", lambda x: (x * x).sum(axis=0))
    s_nq = np.sum(
        np.stack([(o["series_n"][o["ok"]] * o["series_q"][o["ok"]]).sum(axis=0) for o in outs]),
        axis=0,
    )
    s_nb2 = np.sum(
        np.stack([(o["series_n"][o["ok"]] * o["series_b2"][o["ok"]]).sum(axis=0) for o in outs]),
        axis=0,
    )
    pop_site = np.sum(np.stack([o["pop_site_sum"] for o in outs]), axis=0) / kept

    m = float(kept)

    def mean_se(s, s2):
        mean = s / m
        if kept >= 2:
            var = np.maximum(s2 - s * s / m, 0.0) / (m - 1.0)
            se = np.sqrt(var / m)
        else:
            se = np.full_like(mean, np.nan)
        return mean, se

    nbar_mean, nbar_se = mean_se(s_n, s_n2)
    qbar_mean, qbar_se = mean_se(s_q, s_q2)
    b2_mean, b2_se = mean_se(s_b2, s_b2sq)
    if kept >= 2:
        cov_nq = (s_nq - s_n * s_q / m) / (m - 1.0)
        cov_nb2 = (s_nb2 - s_n * s_b2 / m) / (m - 1.0)
    else:
        cov_nq = np.full(n_rec, np.nan)
        cov_nb2 = np.full(n_rec, np.nan)

    live = [o for o in outs if o["ok"].any()]
    batch_nbar = np.stack([o["series_n"][o["ok"]].mean(axis=0) for o in live])
    batch_sizes = np.array([int(o["ok"].sum()) for o in live])

    traj_nbar = None
    if config.store_trajectory_means:
        traj_nbar = np.concatenate([o["series_n"][o["ok"]] for o in outs], axis=0)

    records = []
    first = outs[0]
    for r in range(min(n_full, row_counts[0])):
        if not first["ok"][r]:
            continue
        site = first["site_series"][r]
        records.append(
            TrajectoryRecord(
                times=times,
                site_population_w=site,
                site_avg_population_w=site.mean(axis=1),
                final_state=FieldState(
                    amplitudes=first["final_alpha"][r], time=float(times[-1])
                ),
            )
        )

    return EnsembleResult(
        times=times,
        n_traj=kept,
        n_requested=config.n_traj,
        diverged=diverged,
        pop_site_mean=pop_site,
        nbar_mean=nbar_mean,
        nbar_se=nbar_se,
        qbar_mean=qbar_mean,
        qbar_se=qbar_se,
        b2_mean=b2_mean,
        b2_se=b2_se,
        cov_nbar_qbar=cov_nq,
        cov_nbar_b2=cov_nb2,
        batch_nbar=batch_nbar,
        batch_sizes=batch_sizes,
        traj_nbar=traj_nbar,
        records=records,
        n_sites=n,
    )


def dump_ensemble(path, result: EnsembleResult, header: dict):
    """Columnar trajectory dump (compressed .npz).

    Layout: ``header_json`` (UTF-8 bytes of a sorted-key JSON header, meant to
    carry the config snapshot / hash), ``times``, the ensemble moment columns,
    and time-major per-trajectory blocks ``trajectory_<k>_site_population_w``
    for each fully recorded trajectory.
    """
    import json

    arrays = {
        "header_json": np.frombuffer(
            json.dumps(header, sort_keys=True).encode(), dtype=np.uint8
        ).copy(),
        "times": result.times,
        "nbar_mean": result.nbar_mean,
        "nbar_se": result.nbar_se,
        "pop_site_mean": result.pop_site_mean,
    }
    if result.traj_nbar is not None:
        arrays["traj_nbar"] = result.traj_nbar
    for k, rec in enumerate(result.records):
        arrays[f"trajectory_{k}_site_population_w"] = rec.site_population_w
    np.savez_compressed(path, **arrays)
    return path
