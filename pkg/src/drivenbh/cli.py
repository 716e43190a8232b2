"""Command-line front end.

Subcommands: meanfield, sweep, gap, benchmark, histogram. Each takes a
run-configuration file plus optional --seed / --out-dir / --threads overrides;
--threads changes wall time only, never results. Exit codes: 0 success,
1 usage or configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import lindblad, meanfield
from .config import (
    ConfigError,
    RunConfig,
    engine_config_for,
    lattice_for,
    params_for,
    parse_config,
)
from .engine import EngineError, dump_ensemble, run_ensemble
from .fitting import FitError, fit_power_law, gap_vs_drive
from .manifest import RunManifest, write_csv
from .observables import histogram_p_of_n, population, steady_state_onset, steady_value

__all__ = ["main"]


def _steady_window(cfg: RunConfig, ens) -> float:
    if cfg.t_s is not None:
        return cfg.t_s
    try:
        return steady_state_onset(population(ens))
    except ValueError:
        return 0.5 * cfg.t_end


def cmd_meanfield(cfg: RunConfig, out_dir: Path, seed: int, threads: int) -> RunManifest:
    lattice = lattice_for(cfg)
    f_values = cfg.f_values
    if f_values is None:
        if cfg.f_gamma is None:
            raise ConfigError("field 'f_values' (or 'f_gamma'): required for meanfield")
        f_values = np.array([cfg.f_gamma])
    params = params_for(cfg, lattice, f=float(f_values[0]))
    sweep = meanfield.meanfield_sweep(params, f_values)
    man = RunManifest("meanfield", cfg.raw, seed)
    rows = []
    for f, branches in zip(sweep.f_values, sweep.branches):
        cells: list = [f]
        for k in range(3):
            if k < len(branches):
                cells += [branches[k].n, branches[k].stable]
            else:
                cells += [None, None]
        rows.append(cells)
    man.add(write_csv(
        out_dir / "meanfield.csv",
        ["F/gamma", "n_1", "stable_1", "n_2", "stable_2", "n_3", "stable_3"],
        rows,
    ))
    man.extra["spinodal_lower_F/gamma"] = sweep.spinodal_lower
    man.extra["spinodal_upper_F/gamma"] = sweep.spinodal_upper
    return man


def cmd_sweep(cfg: RunConfig, out_dir: Path, seed: int, threads: int) -> RunManifest:
    lattice = lattice_for(cfg)
    if cfg.f_values is None:
        raise ConfigError("field 'f_values': required for sweep")
    man = RunManifest("sweep", cfg.raw, seed)
    rows = []
    errors = []
    for i, f in enumerate(cfg.f_values):
        params = params_for(cfg, lattice, f=float(f))
        ecfg = engine_config_for(
            cfg, seed=seed, context=i,
            store_trajectory_means=cfg.write_histograms,
        )
        try:
            ens = run_ensemble(params, lattice, ecfg, threads=threads)
        except EngineError as err:
            errors.append(f"F/gamma={f}: {err}")
            rows.append([f, None, None, None])
            continue
        t_s = _steady_window(cfg, ens)
        n_ss, se = steady_value(ens, t_s)
        rows.append([f, n_ss, se, ens.diverged])
        if cfg.write_histograms:
            hist = histogram_p_of_n(ens, t_s, bins=cfg.histogram_bins)
            man.add(write_csv(
                out_dir / f"hist_{i:03d}.csv",
                ["bin_center", "probability"],
                zip(hist.bin_centers, hist.probability),
            ))
    man.add(write_csv(
        out_dir / "sweep.csv",
        ["F/gamma", "n_ss", "n_ss_se", "diverged"], rows,
    ))
    if errors:
        man.extra["errors"] = errors
        if len(errors) == len(cfg.f_values):
            raise EngineError("every sweep point failed: " + "; ".join(errors))
    return man


def cmd_histogram(cfg: RunConfig, out_dir: Path, seed: int, threads: int) -> RunManifest:
    lattice = lattice_for(cfg)
    params = params_for(cfg, lattice)
    ecfg = engine_config_for(cfg, seed=seed, store_trajectory_means=True)
    ens = run_ensemble(params, lattice, ecfg, threads=threads)
    t_s = _steady_window(cfg, ens)
    hist = histogram_p_of_n(ens, t_s, bins=cfg.histogram_bins)
    pop = population(ens)
    man = RunManifest("histogram", cfg.raw, seed)
    man.add(write_csv(
        out_dir / "histogram.csv",
        ["bin_center", "probability"],
        zip(hist.bin_centers, hist.probability),
    ))
    man.add(write_csv(
        out_dir / "population.csv",
        ["t*gamma", "population", "se"],
        zip(pop.times, pop.value, pop.std_error),
    ))
    man.extra["t_s*gamma"] = t_s
    n_ss, se = steady_value(ens, t_s)
    man.extra["n_ss"] = n_ss
    man.extra["n_ss_se"] = se
    if cfg.dump_trajectories:
        man.add(dump_ensemble(out_dir / "trajectories.npz", ens,
                              {"config": {k: str(v) for k, v in cfg.raw.items()},
                               "seed": seed}))
    return man


def cmd_gap(cfg: RunConfig, out_dir: Path, seed: int, threads: int) -> RunManifest:
    if cfg.f_values is None:
        raise ConfigError("field 'f_values': required for gap")
    sizes = cfg.sizes if cfg.sizes is not None else [cfg.L]
    man = RunManifest("gap", cfg.raw, seed)
    minima = []
    for si, L in enumerate(sizes):
        lattice = lattice_for(cfg, L=L)
        params = params_for(cfg, lattice, f=float(cfg.f_values[0]))
        ecfg = engine_config_for(cfg, seed=seed, context=1000 * si)
        scan = gap_vs_drive(params, cfg.f_values, lattice, ecfg, threads=threads,
                            n_bootstrap=cfg.n_bootstrap)
        man.add(write_csv(
            out_dir / f"gap_L{L}.csv",
            ["F/gamma", "lambda/gamma", "lambda_err/gamma",
             "fit_t_lo*gamma", "fit_t_hi*gamma", "error"],
            [[p.f, p.lam, p.lam_err, p.window[0], p.window[1], p.error or ""]
             for p in scan.points],
        ))
        minima.append((L, scan.min_lambda, scan.min_lambda_err, scan.f_at_min))
    man.add(write_csv(
        out_dir / "gap_minima.csv",
        ["L", "min_lambda/gamma", "min_lambda_err/gamma", "F_at_min/gamma"],
        minima,
    ))
    if len(minima) >= 3:
        fit = fit_power_law(
            [m[0] for m in minima], [m[1] for m in minima], [m[2] for m in minima]
        )
        man.extra["power_law"] = {
            "eta": fit.eta, "eta_err": fit.eta_err, "prefactor": fit.prefactor,
        }
    return man


def cmd_benchmark(cfg: RunConfig, out_dir: Path, seed: int, threads: int) -> RunManifest:
    lattice = lattice_for(cfg)
    if cfg.u_values is not None:
        if cfg.uf2_gamma3 is None:
            raise ConfigError(
                "field 'uf2_gamma3': required with u_values (constant U*F^2 family)"
            )
        points = [(float(u), float(np.sqrt(cfg.uf2_gamma3 / u))) for u in cfg.u_values]
    elif cfg.f_values is not None:
        points = [(cfg.u_gamma, float(f)) for f in cfg.f_values]
    else:
        if cfg.f_gamma is None:
            raise ConfigError("field 'f_gamma': required for a single benchmark point")
        points = [(cfg.u_gamma, cfg.f_gamma)]
    man = RunManifest("benchmark", cfg.raw, seed)
    rows = []
    for i, (u, f) in enumerate(points):
        params = params_for(cfg, lattice, f=f, u=u)
        branches = meanfield.meanfield_roots(params)
        n_mf = max(b.n for b in branches)
        n_max = cfg.n_max if cfg.n_max is not None else lindblad.suggest_n_max(n_mf)
        basis = lindblad.FockBasis(n_sites=lattice.n_sites, n_max=n_max)
        try:
            action = lindblad.build_liouvillian_action(params, lattice, basis)
        except ValueError as err:
            raise RuntimeError(
                f"{err}; try fewer sites or a weaker drive (smaller steady population)"
            ) from err
        alpha_mf = max(branches, key=lambda b: b.n).alpha
        rho0 = lindblad.coherent_product_rho(basis, alpha_mf)
        rho, _ = lindblad.steady_state(
            action, tol=cfg.exact_tol, dt=cfg.exact_dt, rho0=rho0,
            population_tol=cfg.exact_population_tol,
        )
        n_ex = lindblad.expectation(rho, "population")
        ecfg = engine_config_for(cfg, seed=seed, context=i)
        ens = run_ensemble(params, lattice, ecfg, threads=threads)
        n_tw, se = steady_value(ens, _steady_window(cfg, ens))
        rows.append([u, f, n_max, n_ex, n_tw, se, n_tw / n_ex])
    man.add(write_csv(
        out_dir / "benchmark.csv",
        ["U/gamma", "F/gamma", "n_max", "n_exact", "n_twa", "n_twa_se", "ratio"],
        rows,
    ))
    return man


_COMMANDS = {
    "meanfield": cmd_meanfield,
    "sweep": cmd_sweep,
    "gap": cmd_gap,
    "benchmark": cmd_benchmark,
    "histogram": cmd_histogram,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="drivenbh",
        description="Driven-dissipative Bose-Hubbard simulation toolkit",
    )
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("config", help="run-configuration file (key = value lines)")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out-dir", default=".", help="output directory")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads (wall time only; results identical)")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        cfg = parse_config(args.config)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    seed = cfg.seed if args.seed is None else args.seed
    cfg = replace(cfg, seed=seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        man = _COMMANDS[args.command](cfg, out_dir, seed, max(args.threads, 1))
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except (EngineError, FitError, lindblad.CutoffError, RuntimeError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 2
    man.write(out_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
