"""Relaxation-rate extraction and finite-size power-law fits.

The asymptotic decay of the mean occupation towards its steady value,
n(t) = n_ss + A exp(-lambda*t), gives the Liouvillian frequency gap lambda.
The fit window is chosen automatically as the longest late-time stretch where
log|n(t) - n_ss| is linear; lambda errors come from bootstrap resampling over
trajectory batches. Gap minima over the drive grid, min_lambda(L), are then
regressed as a power law L^(-eta).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import curve_fit

from .engine import EngineConfig, EnsembleResult, run_ensemble
from .model import LatticeSpec, ModelParams
from .observables import ObservableSeries, population

__all__ = [
    "ExpFit",
    "PowerLawFit",
    "FitError",
    "fit_exponential",
    "gap_vs_drive",
    "GapPoint",
    "GapScan",
    "fit_power_law",
]


class FitError(RuntimeError):
    """Raised when a decay series has no usable asymptotic window."""


@dataclass(frozen=True)
class ExpFit:
    """Exponential relaxation fit n(t) = n_ss + A exp(-lambda*t)."""

    lam: float
    amplitude: float
    n_ss: float
    window: tuple[float, float]
    lambda_err: float
    r_squared: float


@dataclass(frozen=True)
class PowerLawFit:
    """min_lambda(L) = prefactor * L^(-eta)."""

    eta: float
    prefactor: float
    eta_err: float


_MIN_WINDOW_POINTS = 8
_R2_THRESHOLD = 0.99


def _linear_r2(t: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    """Least-squares slope/intercept of y(t) and the R^2 of the fit."""
    a = np.vstack([t, np.ones_like(t)]).T
    coef, *_ = np.linalg.lstsq(a, y, rcond=None)
    resid = y - a @ coef
    ss_res = float(np.dot(resid, resid))
    ss_tot = float(np.dot(y - y.mean(), y - y.mean()))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    return float(coef[0]), float(coef[1]), r2


def _select_window(
    times: np.ndarray, values: np.ndarray, n_ss: float, floor: np.ndarray
) -> tuple[int, int, float]:
    """Longest suffix of the series with log-linear |n - n_ss| decay.

    Points whose deviation is within ``floor`` (3 SE, or the estimated noise
    level) are dropped from the suffix end first: there the signal is
    statistically indistinguishable from n_ss and log|.| is pure noise.
    """
    dev = np.abs(values - n_ss)
    usable = dev > np.maximum(floor, 1e-300)
    # cut the noise-dominated tail: keep up to the last stretch where the
    # deviation sits persistently above the floor (isolated noise exceedances
    # must not drag the window into the flat tail)
    w = min(9, len(values))
    frac = np.convolve(usable.astype(float), np.ones(w) / w, mode="same")
    persistent = np.nonzero(frac >= 0.75)[0]
    if persistent.size == 0 or persistent[-1] < _MIN_WINDOW_POINTS:
        raise FitError("asymptotic regime not reached (series too noisy or short)")
    last = int(persistent[-1])
    best = None
    logdev = np.where(usable, np.log(np.where(usable, dev, 1.0)), np.nan)
    # cap the window at ~3 decades above its end: a longer span only dilutes
    # the late-time asymptotics the fit is after
    dev_end = max(dev[last], floor[last] if np.ndim(floor) else floor, 1e-300)
    rmax = np.maximum.accumulate(dev[: last + 1][::-1])[::-1]
    inside = np.nonzero(rmax <= 1e3 * dev_end)[0]
    start_lo = int(inside[0]) if inside.size else 0
    if last - start_lo < _MIN_WINDOW_POINTS:
        start_lo = 0
    starts = np.arange(start_lo, last - _MIN_WINDOW_POINTS + 2)
    if len(starts) > 128:  # window precision does not need per-sample granularity
        starts = np.unique(np.linspace(starts[0], starts[-1], 128).astype(int))
    for start in starts:
        idx = np.arange(start, last + 1)
        keep = idx[usable[idx]]
        # the log-linearity check skips points buried in the noise floor, but
        # they must stay rare or the window is noise, not signal
        if keep.size < max(_MIN_WINDOW_POINTS, int(0.8 * idx.size)):
            continue
        slope, _, r2 = _linear_r2(times[keep], logdev[keep])
        if r2 > _R2_THRESHOLD and slope < 0:
            best = (int(start), last, r2)
            break  # longest acceptable suffix wins
    if best is None:
        raise FitError("asymptotic regime not reached (no log-linear window)")
    return best


def _model(tt, n_ss, a, lam):
    return n_ss + a * np.exp(-lam * tt)


def _initial_offset(times, values, n_ss_hint) -> float:
    """First-pass steady-value estimate from a crude fit of the late series.

    A biased offset would put a spurious zero crossing of |n - n_ss| inside
    the window and wreck the log-linearity scan, so a rough 3-parameter fit
    on the late stretch beats a plain tail average.
    """
    if n_ss_hint is not None:
        return float(n_ss_hint)
    k = int(0.4 * len(values))
    t, y = times[k:], values[k:]
    try:
        span = max(t[-1] - t[0], 1e-12)
        p0 = (float(y[-1]), float(y[0] - y[-1]), 2.0 / span)
        popt, _ = curve_fit(_model, t, y, p0=p0, maxfev=5000)
        if np.isfinite(popt[0]) and popt[2] > 0:
            return float(popt[0])
    except (RuntimeError, ValueError):
        pass
    return float(values[-max(len(values) // 20, 8):].mean())


def _fit_once(
    times: np.ndarray,
    values: np.ndarray,
    sigma: np.ndarray | None,
    n_ss0: float,
    floor: np.ndarray,
    window: tuple[int, int] | None = None,
) -> ExpFit:
    if window is None:
        start, last, r2 = _select_window(times, values, n_ss0, floor)
    else:
        start, last = window
        r2 = np.nan
    seg = slice(start, last + 1)
    t, y = times[seg], values[seg]
    dev = values[start] - n_ss0
    if dev == 0.0:
        raise FitError("series already at the steady value on the window")
    lam0 = max(
        -_linear_r2(t, np.log(np.abs(y - n_ss0) + 1e-300))[0], 1e-6
    )
    sig = None
    if sigma is not None:
        sig = np.maximum(sigma[seg], 1e-12 * max(1.0, np.abs(y).max()))
    p0 = (n_ss0, dev * np.exp(lam0 * times[start]), lam0)
    popt, _ = curve_fit(
        _model, t, y, p0=p0, sigma=sig, absolute_sigma=False, maxfev=20000
    )
    n_ss, a, lam = popt
    if lam <= 0:
        raise FitError(f"fitted decay rate is non-positive ({lam:.3e})")
    return ExpFit(
        lam=float(lam),
        amplitude=float(a),
        n_ss=float(n_ss),
        window=(start, last),
        lambda_err=np.nan,
        r_squared=float(r2),
    )


def fit_exponential(
    series: ObservableSeries,
    n_ss_hint: float | None = None,
    ensemble: EnsembleResult | None = None,
    n_bootstrap: int = 200,
    bootstrap_seed: int = 0,
) -> ExpFit:
    """Joint least-squares fit of (n_ss, A, lambda) on the auto-selected window.

    The window is the longest suffix where log|n(t) - n_ss| is linear with
    R^2 > 0.99, after discarding the trailing points that sit within 3 SE of
    the steady value. If ``ensemble`` is given, lambda_err is the 1-sigma
    spread over bootstrap resamples of its per-batch mean series, refit on the
    same window (trajectory-level blocks, never time-level resampling: time
    samples are serially correlated).
    """
    times = np.asarray(series.times, dtype=float)
    values = np.asarray(series.value, dtype=float)
    se = np.asarray(series.std_error, dtype=float)
    have_se = bool(np.all(np.isfinite(se))) and bool(np.any(se > 0))
    # noise level of the tail, for series that carry no standard errors:
    # first differences of the last fifth are noise-dominated there
    tail = values[-max(len(values) // 5, 8):]
    noise_est = float(np.std(np.diff(tail)) / np.sqrt(2.0)) if len(tail) > 3 else 0.0
    floor = 3.0 * np.maximum(np.where(np.isfinite(se), se, 0.0), noise_est)
    sigma = se if have_se else None
    n_ss0 = _initial_offset(times, values, n_ss_hint)
    fit = _fit_once(times, values, sigma, n_ss0, floor)
    # refine: the window depends on the offset estimate, so iterate to a
    # fixed point of (window, fit)
    for _ in range(3):
        try:
            refit = _fit_once(times, values, sigma, fit.n_ss, floor)
        except (FitError, RuntimeError):
            break
        done = abs(refit.lam - fit.lam) < 0.01 * fit.lam
        fit = refit
        if done:
            break

    lam_err = np.nan
    if ensemble is not None and ensemble.batch_nbar.shape[0] >= 2:
        rng = np.random.default_rng(bootstrap_seed)
        nb = ensemble.batch_nbar.shape[0]
        w = ensemble.batch_sizes / ensemble.batch_sizes.sum()
        lams = []
        for _ in range(n_bootstrap):
            pick = rng.integers(0, nb, size=nb)
            wts = w[pick] / w[pick].sum()
            resampled = np.sum(wts[:, None] * ensemble.batch_nbar[pick], axis=0) - 0.5
            try:
                refit = _fit_once(times, resampled, None, fit.n_ss, floor,
                                  window=fit.window)
                lams.append(refit.lam)
            except (FitError, RuntimeError):
                continue
        if len(lams) >= max(10, n_bootstrap // 4):
            lam_err = float(np.std(lams, ddof=1))
    start, last = fit.window
    return ExpFit(
        lam=fit.lam,
        amplitude=fit.amplitude,
        n_ss=fit.n_ss,
        window=(float(times[start]), float(times[last])),
        lambda_err=lam_err,
        r_squared=fit.r_squared,
    )


@dataclass(frozen=True)
class GapPoint:
    f: float
    lam: float
    lam_err: float
    window: tuple[float, float]
    error: str | None = None


@dataclass(frozen=True)
class GapScan:
    points: list[GapPoint]
    min_lambda: float
    min_lambda_err: float
    f_at_min: float


def _parabolic_min(f3: np.ndarray, logl3: np.ndarray) -> tuple[float, float]:
    """Vertex of the parabola through three (f, log lambda) points."""
    c = np.polyfit(f3, logl3, 2)
    if c[0] <= 0:
        return float(f3[np.argmin(logl3)]), float(np.exp(logl3.min()))
    fv = -c[1] / (2.0 * c[0])
    fv = float(np.clip(fv, f3.min(), f3.max()))
    return fv, float(np.exp(np.polyval(c, fv)))


def gap_vs_drive(
    params: ModelParams,
    f_values,
    lattice: LatticeSpec,
    config: EngineConfig,
    threads: int = 1,
    n_bootstrap: int = 200,
) -> GapScan:
    """Liouvillian gap lambda(F) from vacuum-start relaxation at each drive.

    The engine config should give the relaxation tail enough signal: as a rule
    of thumb the late-time standard error must stay below ~1/30 of the decay
    amplitude over a window of >= 3/lambda (more trajectories near the gap
    minimum). Each F point gets its own RNG context. Fit failures are recorded
    per point, not raised. The reported minimum refines the grid minimum with
    a 3-point parabola in (F, log lambda).
    """
    f_values = np.asarray(f_values, dtype=float)
    points: list[GapPoint] = []
    for i, f in enumerate(f_values):
        p = replace(params, f=float(f))
        cfg = replace(config, context=config.context + i)
        ens = run_ensemble(p, lattice, cfg, threads=threads)
        series = population(ens)
        try:
            fit = fit_exponential(series, ensemble=ens, n_bootstrap=n_bootstrap,
                                  bootstrap_seed=cfg.seed + i)
            points.append(GapPoint(f=float(f), lam=fit.lam,
                                   lam_err=fit.lambda_err, window=fit.window))
        except FitError as err:
            points.append(GapPoint(f=float(f), lam=np.nan, lam_err=np.nan,
                                   window=(np.nan, np.nan), error=str(err)))
    good = [p for p in points if np.isfinite(p.lam)]
    if not good:
        raise FitError("no drive point produced a usable decay fit")
    lams = np.array([p.lam for p in good])
    fs = np.array([p.f for p in good])
    k = int(np.argmin(lams))
    if 0 < k < len(good) - 1:
        f_min, lam_min = _parabolic_min(fs[k - 1 : k + 2], np.log(lams[k - 1 : k + 2]))
    else:
        f_min, lam_min = float(fs[k]), float(lams[k])
    return GapScan(
        points=points,
        min_lambda=lam_min,
        min_lambda_err=float(good[k].lam_err),
        f_at_min=f_min,
    )


def fit_power_law(sizes, gap_minima, errors=None) -> PowerLawFit:
    """Weighted regression of log(min lambda) on log L: min_lambda ~ L^(-eta)."""
    sizes = np.asarray(sizes, dtype=float)
    gaps = np.asarray(gap_minima, dtype=float)
    if sizes.shape != gaps.shape or sizes.size < 3:
        raise ValueError("need at least 3 (L, min_lambda) pairs")
    if np.any(sizes <= 0) or np.any(gaps <= 0):
        raise ValueError("sizes and gap minima must be positive")
    x = np.log(sizes)
    y = np.log(gaps)
    if errors is not None:
        errors = np.asarray(errors, dtype=float)
        wgt = 1.0 / np.maximum(errors / gaps, 1e-12) ** 2
    else:
        wgt = np.ones_like(y)
    sw = wgt.sum()
    xm = np.sum(wgt * x) / sw
    ym = np.sum(wgt * y) / sw
    sxx = np.sum(wgt * (x - xm) ** 2)
    slope = np.sum(wgt * (x - xm) * (y - ym)) / sxx
    intercept = ym - slope * xm
    if errors is not None:
        slope_var = 1.0 / sxx
    else:
        resid = y - (slope * x + intercept)
        dof = max(len(x) - 2, 1)
        slope_var = float(np.dot(resid, resid)) / dof / sxx
    return PowerLawFit(
        eta=float(-slope),
        prefactor=float(np.exp(intercept)),
        eta_err=float(np.sqrt(slope_var)),
    )
