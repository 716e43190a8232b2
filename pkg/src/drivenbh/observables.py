"""Physical observables from raw Wigner ensemble moments.

Trajectory averages of the stochastic field are symmetrically-ordered moments;
this module is the single place where ordering corrections are applied:

    <a^dag a>            = <|alpha|^2>_W - 1/2
    <a^dag a^dag a a>    = <|alpha|^4>_W - 2 <|alpha|^2>_W + 1/2
    n_{k=0}              = <|b0|^2>_W - 1/2,   b0 = sum_j alpha_j / sqrt(N)

Population histograms p(n), following the convention of the steady-state
number-distribution plots, bin the raw site-averaged Wigner variable nbar^W
(no 1/2 subtracted); the corrected mean is reported separately.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import EnsembleResult

__all__ = [
    "ObservableSeries",
    "PopulationHistogram",
    "population",
    "histogram_p_of_n",
    "condensate_fraction",
    "g2_local",
    "steady_state_onset",
    "steady_value",
]


@dataclass(frozen=True)
class ObservableSeries:
    """Ensemble-averaged time series with trajectory-level standard errors."""

    times: np.ndarray
    value: np.ndarray
    std_error: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        if not (len(self.times) == len(self.value) == len(self.std_error)):
            raise ValueError("times, value and std_error must have equal length")


@dataclass(frozen=True)
class PopulationHistogram:
    """Normalized distribution of the site-averaged steady-state population."""

    bin_edges: np.ndarray
    probability: np.ndarray
    t_start: float

    @property
    def bin_centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])


def _require_se(ensemble: EnsembleResult):
    if ensemble.n_traj < 2:
        raise ValueError("need at least 2 trajectories to estimate standard errors")


def population(ensemble: EnsembleResult) -> ObservableSeries:
    """Mean occupation per site, <a^dag a> averaged over sites and trajectories."""
    _require_se(ensemble)
    return ObservableSeries(
        times=ensemble.times,
        value=ensemble.nbar_mean - 0.5,
        std_error=ensemble.nbar_se,
        kind="population",
    )


def histogram_p_of_n(
    ensemble: EnsembleResult,
    t_s: float,
    bins="fd",
) -> PopulationHistogram:
    """p(n) over all trajectories and recorded times after the onset t_s.

    ``bins`` follows numpy.histogram_bin_edges (Freedman-Diaconis by default;
    pass an integer or explicit edges to reproduce fixed-bin figures).
    """
    if ensemble.traj_nbar is None:
        raise ValueError(
            "per-trajectory series not stored; run the engine with "
            "store_trajectory_means=True"
        )
    if t_s >= ensemble.times[-1]:
        raise ValueError(f"t_s={t_s} leaves no samples (t_end={ensemble.times[-1]})")
    mask = ensemble.times > t_s
    samples = ensemble.traj_nbar[:, mask].ravel()
    if samples.size == 0:
        raise ValueError("no samples after t_s")
    edges = np.histogram_bin_edges(samples, bins=bins)
    counts, edges = np.histogram(samples, bins=edges)
    prob = counts / counts.sum()
    return PopulationHistogram(bin_edges=edges, probability=prob, t_start=float(t_s))


def condensate_fraction(ensemble: EnsembleResult) -> ObservableSeries:
    """Fraction f0 = n_{k=0} / n_tot of the population in the k=0 mode.

    Times where the total corrected population is consistent with zero are
    flagged as NaN. Errors are propagated to first order from the trajectory
    covariance of |b0|^2 and nbar.
    """
    _require_se(ensemble)
    n = ensemble.n_sites
    nk0 = ensemble.b2_mean - 0.5
    ntot = n * (ensemble.nbar_mean - 0.5)
    bad = ntot <= 0
    ntot_safe = np.where(bad, 1.0, ntot)
    f0 = np.where(bad, np.nan, nk0 / ntot_safe)
    m = float(ensemble.n_traj)
    var_b2 = ensemble.b2_se**2
    var_nt = (n * ensemble.nbar_se) ** 2
    cov = n * ensemble.cov_nbar_b2 / m
    se = np.abs(f0) * np.sqrt(
        np.maximum(
            var_b2 / np.where(nk0 == 0, np.inf, nk0) ** 2
            + var_nt / ntot_safe**2
            - 2.0 * cov / (np.where(nk0 == 0, np.inf, nk0) * ntot_safe),
            0.0,
        )
    )
    se = np.where(bad, np.nan, se)
    return ObservableSeries(times=ensemble.times, value=f0, std_error=se, kind="f0")


def g2_local(ensemble: EnsembleResult) -> ObservableSeries:
    """Local equal-time second-order correlation <adag adag a a> / <adag a>^2.

    Site-averaged: numerator and denominator are averaged over sites before
    taking the ratio. Times with population consistent with zero are NaN.
    """
    _require_se(ensemble)
    num = ensemble.qbar_mean - 2.0 * ensemble.nbar_mean + 0.5
    pop = ensemble.nbar_mean - 0.5
    bad = pop <= 0
    pop_safe = np.where(bad, 1.0, pop)
    g2 = np.where(bad, np.nan, num / pop_safe**2)
    # delta method: g2 = N/D^2 with N = q - 2p + 1/2 (Wigner moments), D = p - 1/2
    m = float(ensemble.n_traj)
    var_q = ensemble.qbar_se**2
    var_p = ensemble.nbar_se**2
    cov_qp = ensemble.cov_nbar_qbar / m
    dg_dq = 1.0 / pop_safe**2
    dg_dp = (-2.0 * pop_safe - 2.0 * num) / pop_safe**3
    var = dg_dq**2 * var_q + dg_dp**2 * var_p + 2.0 * dg_dq * dg_dp * cov_qp
    se = np.where(bad, np.nan, np.sqrt(np.maximum(var, 0.0)))
    return ObservableSeries(times=ensemble.times, value=g2, std_error=se, kind="g2")


def steady_state_onset(series: ObservableSeries) -> float:
    """Default steady-state onset: earliest time after which the series stays
    within 3 standard errors of its final value."""
    v = series.value
    se = series.std_error
    dev = np.abs(v - v[-1]) <= 3.0 * np.maximum(se, se[-1])
    ok_from = np.minimum.accumulate(dev[::-1])[::-1]
    idx = np.argmax(ok_from)
    if not ok_from[idx]:
        raise ValueError("series never settles within 3 SE of its final value")
    return float(series.times[idx])


def steady_value(
    ensemble: EnsembleResult, t_s: float
) -> tuple[float, float]:
    """Steady-state population and SE from the time average over t > t_s.

    Each batch's time-averaged mean is one independent sample; the SE is the
    spread of those batch averages, which correctly accounts for serial
    correlation within trajectories.
    """
    mask = ensemble.times > t_s
    if not np.any(mask):
        raise ValueError(f"t_s={t_s} leaves no samples")
    batch_avgs = ensemble.batch_nbar[:, mask].mean(axis=1)
    w = ensemble.batch_sizes / ensemble.batch_sizes.sum()
    mean = float(np.sum(w * batch_avgs))
    if len(batch_avgs) >= 2:
        var = float(np.sum(w * (batch_avgs - mean) ** 2) / (1.0 - np.sum(w**2)))
        se = np.sqrt(var * np.sum(w**2))
    else:
        se = np.nan
    return mean - 0.5, float(se)
