import numpy as np
import pytest

from drivenbh.engine import EngineConfig, run_ensemble
from drivenbh.fitting import (
    FitError,
    fit_exponential,
    fit_power_law,
    gap_vs_drive,
)
from drivenbh.model import ModelParams, build_lattice
from drivenbh.observables import ObservableSeries, population


def series(times, values, se=None):
    se = np.zeros_like(times) if se is None else se
    return ObservableSeries(times=times, value=values, std_error=se, kind="population")


class TestFitExponential:
    def test_synthetic_recovery_within_percent(self):
        rng = np.random.default_rng(0)
        t = np.linspace(0.0, 25.0, 1200)
        y = 2.0 + 3.0 * np.exp(-0.5 * t) + rng.normal(0.0, 1e-3, t.size)
        fit = fit_exponential(series(t, y))
        assert fit.lam == pytest.approx(0.5, rel=0.01)
        assert fit.n_ss == pytest.approx(2.0, abs=5e-3)
        assert fit.amplitude == pytest.approx(3.0, rel=0.05)

    def test_noiseless_deterministic_decay(self):
        t = np.linspace(0.0, 12.0, 600)
        y = 1.0 * np.exp(-t)
        fit = fit_exponential(series(t, y))
        assert fit.lam == pytest.approx(1.0, rel=1e-6)

    def test_two_exponential_recovery(self):
        rng = np.random.default_rng(1)
        t = np.linspace(0.0, 30.0, 1500)
        y = 2.0 + 3.0 * np.exp(-0.5 * t) + 0.1 * np.exp(-5.0 * t)
        y += rng.normal(0.0, 1e-4, t.size)
        fit = fit_exponential(series(t, y))
        assert fit.lam == pytest.approx(0.5, rel=0.02)

    def test_strong_fast_transient_excluded_from_window(self):
        t = np.linspace(0.0, 30.0, 1500)
        y = 2.0 + 3.0 * np.exp(-0.5 * t) + 2.0 * np.exp(-5.0 * t)
        fit = fit_exponential(series(t, y))
        assert fit.window[0] > 0.0  # early non-exponential stretch dropped
        assert fit.lam == pytest.approx(0.5, rel=0.02)

    def test_engine_population_decay_rate_is_gamma(self):
        # u = 0, f = 0, deterministic: population decays at exactly gamma
        lat = build_lattice("single", 1)
        p = ModelParams(delta=0.0, u=0.0, f=0.0, j_hop=0.0, z=0)
        cfg = EngineConfig(dt=0.005, t_end=8.0, n_traj=1, seed=0,
                           record_stride=4, noise=False, initial_state="custom",
                           custom_initial=np.array([1.0 + 0.0j]))
        ens = run_ensemble(p, lat, cfg)
        pop = ObservableSeries(times=ens.times, value=ens.nbar_mean,
                               std_error=np.zeros_like(ens.times))
        fit = fit_exponential(pop, n_ss_hint=0.0)
        assert fit.lam == pytest.approx(1.0, rel=1e-4)

    def test_pure_noise_raises(self):
        rng = np.random.default_rng(2)
        t = np.linspace(0.0, 10.0, 400)
        y = 1.0 + rng.normal(0.0, 0.05, t.size)
        with pytest.raises(FitError, match="asymptotic"):
            fit_exponential(series(t, y, se=np.full_like(t, 0.05)))

    def test_scale_equivariance(self):
        rng = np.random.default_rng(3)
        t = np.linspace(0.0, 25.0, 900)
        y = 2.0 + 3.0 * np.exp(-0.7 * t) + rng.normal(0.0, 1e-4, t.size)
        f1 = fit_exponential(series(t, y))
        c = 13.7
        f2 = fit_exponential(series(t, c * y))
        assert f2.lam == pytest.approx(f1.lam, rel=1e-6)
        assert f2.amplitude == pytest.approx(c * f1.amplitude, rel=1e-6)
        assert f2.n_ss == pytest.approx(c * f1.n_ss, rel=1e-6)

    def test_time_shift_equivariance(self):
        rng = np.random.default_rng(4)
        t = np.linspace(0.0, 25.0, 900)
        y = 2.0 + 3.0 * np.exp(-0.7 * t) + rng.normal(0.0, 1e-4, t.size)
        t0 = 5.0
        f1 = fit_exponential(series(t, y))
        f2 = fit_exponential(series(t + t0, y))
        assert f2.lam == pytest.approx(f1.lam, rel=1e-6)
        assert f2.n_ss == pytest.approx(f1.n_ss, rel=1e-5)
        assert f2.amplitude == pytest.approx(f1.amplitude * np.exp(f1.lam * t0),
                                             rel=1e-4)

    def test_bootstrap_error_shrinks_with_trajectories(self):
        # lambda_err on synthetic batched ensembles scales like 1/sqrt(M)
        def make_ens(m_batches, seed):
            rng = np.random.default_rng(seed)
            t = np.linspace(0.0, 20.0, 400)
            clean = 1.0 + 2.0 * np.exp(-0.5 * t)
            batch = clean + rng.normal(0.0, 0.05, (m_batches, t.size))
            from drivenbh.engine import EnsembleResult

            return t, EnsembleResult(
                times=t, n_traj=m_batches * 16, n_requested=m_batches * 16,
                diverged=0, pop_site_mean=clean[:, None],
                nbar_mean=batch.mean(axis=0) + 0.5,
                nbar_se=batch.std(axis=0, ddof=1) / np.sqrt(m_batches),
                qbar_mean=np.zeros_like(t), qbar_se=np.zeros_like(t),
                b2_mean=np.zeros_like(t), b2_se=np.zeros_like(t),
                cov_nbar_qbar=np.zeros_like(t), cov_nbar_b2=np.zeros_like(t),
                batch_nbar=batch + 0.5,
                batch_sizes=np.full(m_batches, 16),
                traj_nbar=None, records=[], n_sites=1,
            )

        errs = []
        for m in (25, 400):
            t, ens = make_ens(m, seed=m)
            pop = ObservableSeries(times=t, value=ens.nbar_mean - 0.5,
                                   std_error=ens.nbar_se)
            fit = fit_exponential(pop, ensemble=ens, n_bootstrap=120,
                                  bootstrap_seed=1)
            errs.append(fit.lambda_err)
        ratio = errs[0] / errs[1]
        assert 2.0 < ratio < 8.0  # expect ~4 = sqrt(400/25)


class TestPowerLaw:
    def test_noiseless_exact(self):
        L = np.array([2, 3, 4, 6, 8], dtype=float)
        fit = fit_power_law(L, 7.0 * L**-3.3)
        assert fit.eta == pytest.approx(3.3, abs=1e-9)
        assert fit.prefactor == pytest.approx(7.0, rel=1e-9)
        assert fit.eta_err < 1e-9

    def test_noisy_within_errors(self):
        rng = np.random.default_rng(5)
        L = np.array([2, 3, 4, 6, 8, 12], dtype=float)
        true = 7.0 * L**-3.3
        noisy = true * np.exp(rng.normal(0.0, 0.05, L.size))
        fit = fit_power_law(L, noisy, errors=0.05 * noisy)
        assert abs(fit.eta - 3.3) < 3 * fit.eta_err

    def test_validation(self):
        with pytest.raises(ValueError):
            fit_power_law([2, 3], [1.0, 0.5])
        with pytest.raises(ValueError):
            fit_power_law([2, 3, 4], [1.0, -0.5, 0.2])
        with pytest.raises(ValueError):
            fit_power_law([2, 3, 0], [1.0, 0.5, 0.2])


class TestGapVsDrive:
    def test_linear_single_site_flat_gap(self):
        # u = 0: the Liouvillian gap of the linear cavity is gamma/2 (the
        # field mode) at every drive, so the pipeline must return a flat
        # curve at 1/2; the deterministic (noise-free) start from the empty
        # cavity exposes the asymptotic decay exactly
        lat = build_lattice("single", 1)
        p = ModelParams(delta=0.0, u=0.0, f=1.0, j_hop=0.0, z=0)
        cfg = EngineConfig(dt=0.01, t_end=30.0, n_traj=2, seed=11,
                           record_stride=10, batch_size=1, noise=False,
                           initial_state="custom",
                           custom_initial=np.zeros(1, dtype=complex))
        scan = gap_vs_drive(p, [0.5, 1.0, 1.5], lat, cfg, n_bootstrap=0)
        lams = np.array([pt.lam for pt in scan.points])
        assert np.all(np.isfinite(lams))
        assert np.allclose(lams, 0.5, rtol=0.03)
        assert lams.max() - lams.min() < 1e-6 * 0.5 + 0.01  # flat in F

    def test_failures_reported_per_point(self):
        lat = build_lattice("single", 1)
        p = ModelParams(delta=0.1, u=0.0, f=1.0, j_hop=0.0, z=0)
        # t_end far too short for any asymptotic window
        cfg = EngineConfig(dt=0.01, t_end=0.3, n_traj=64, seed=1,
                           record_stride=1, batch_size=32)
        with pytest.raises(FitError, match="no drive point"):
            gap_vs_drive(p, [1.0], lat, cfg, n_bootstrap=10)
