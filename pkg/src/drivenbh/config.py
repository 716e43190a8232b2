"""Plain-text run configuration: ``key = value`` lines, ``#`` comments.

All frequencies carry a ``_gamma`` suffix and are in units of the loss rate
gamma; times (``dt``, ``t_end``, ``t_s``) are in units of 1/gamma. Grids can
be comma lists (``1.5,1.55,1.6``) or inclusive ranges (``1.5:1.6:0.05``).
See the README for the full schema and per-command requirements.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .engine import EngineConfig
from .model import LatticeSpec, ModelParams, build_lattice

__all__ = ["RunConfig", "ConfigError", "parse_config", "params_for", "engine_config_for"]


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


def _parse_grid(text: str, key: str) -> np.ndarray:
    text = text.strip()
    try:
        if ":" in text:
            parts = [float(p) for p in text.split(":")]
            if len(parts) != 3:
                raise ValueError
            start, stop, step = parts
            if step <= 0 or stop < start:
                raise ValueError
            n = int(np.floor((stop - start) / step + 1e-9)) + 1
            return start + step * np.arange(n)
        return np.array([float(p) for p in text.split(",") if p.strip() != ""])
    except ValueError:
        raise ConfigError(
            f"field '{key}': expected a comma list or start:stop:step range, got {text!r}"
        ) from None


@dataclass
class RunConfig:
    """Validated contents of a run-configuration file."""

    lattice: str = "ring"
    L: int = 4
    delta_gamma: float = 0.1
    u_gamma: float = 0.0
    zj_gamma: float = 0.0
    f_gamma: float | None = None
    dt: float = 0.01
    t_end: float = 50.0
    n_traj: int = 1024
    seed: int = 1
    record_stride: int = 10
    scheme: str = "heun"
    initial_state: str = "wigner_vacuum"
    alpha0: complex = 0.0 + 0.0j
    batch_size: int = 512
    t_s: float | None = None
    f_values: np.ndarray | None = None
    sizes: list[int] | None = None
    histogram_bins: int | str = "fd"
    write_histograms: bool = False
    dump_trajectories: bool = False
    n_max: int | None = None
    u_values: np.ndarray | None = None
    uf2_gamma3: float | None = None
    exact_tol: float = 1e-9
    exact_dt: float | None = None
    exact_population_tol: float | None = 1e-4
    n_bootstrap: int = 200
    raw: dict = field(default_factory=dict, repr=False)


_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def _convert(key: str, text: str):
    text = text.strip()
    try:
        if key in ("L", "n_traj", "seed", "record_stride", "batch_size",
                   "n_max", "n_bootstrap"):
            return int(text)
        if key in ("delta_gamma", "u_gamma", "zj_gamma", "f_gamma", "dt",
                   "t_end", "t_s", "uf2_gamma3", "exact_tol", "exact_dt",
                   "exact_population_tol"):
            return float(text)
        if key == "alpha0":
            return complex(text.replace(" ", ""))
        if key in ("f_values", "u_values"):
            return _parse_grid(text, key)
        if key == "sizes":
            return [int(p) for p in text.split(",") if p.strip() != ""]
        if key == "histogram_bins":
            return text if text == "fd" else int(text)
        if key in ("write_histograms", "dump_trajectories"):
            if text.lower() not in _BOOL:
                raise ValueError
            return _BOOL[text.lower()]
        if key in ("lattice", "scheme", "initial_state"):
            return text
    except ConfigError:
        raise
    except ValueError:
        raise ConfigError(f"field '{key}': could not parse {text!r}") from None
    raise ConfigError(f"unknown key '{key}'")


def parse_config(path_or_text: str | Path) -> RunConfig:
    """Read and validate a configuration file (or literal text)."""
    p = Path(path_or_text)
    if p.exists():
        text = p.read_text()
    else:
        text = str(path_or_text)
        if "=" not in text:
            raise ConfigError(f"config file not found: {path_or_text}")
    known = {f.name for f in fields(RunConfig)} - {"raw"}
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, val = body.partition("=")
        key = key.strip()
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        try:
            values[key] = _convert(key, val)
        except ConfigError as err:
            raise ConfigError(f"line {lineno}: {err}") from None
    cfg = RunConfig(**values, raw=values)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    if cfg.lattice not in ("ring", "torus", "dimer", "single"):
        raise ConfigError(
            f"field 'lattice': must be ring, torus, dimer or single, got {cfg.lattice!r}"
        )
    if cfg.dt <= 0:
        raise ConfigError(f"field 'dt': must be positive, got {cfg.dt}")
    if cfg.t_end < cfg.dt:
        raise ConfigError(f"field 't_end': must be >= dt, got {cfg.t_end}")
    if cfg.n_traj < 1:
        raise ConfigError(f"field 'n_traj': must be >= 1, got {cfg.n_traj}")
    if cfg.u_gamma < 0:
        raise ConfigError(f"field 'u_gamma': must be >= 0, got {cfg.u_gamma}")
    if cfg.f_gamma is not None and cfg.f_gamma < 0:
        raise ConfigError(f"field 'f_gamma': must be >= 0, got {cfg.f_gamma}")
    if cfg.zj_gamma < 0:
        raise ConfigError(f"field 'zj_gamma': must be >= 0, got {cfg.zj_gamma}")
    if cfg.scheme not in ("heun", "euler_maruyama"):
        raise ConfigError(f"field 'scheme': unknown scheme {cfg.scheme!r}")
    if cfg.initial_state not in ("wigner_vacuum", "coherent"):
        raise ConfigError(
            f"field 'initial_state': must be wigner_vacuum or coherent in a "
            f"config file, got {cfg.initial_state!r}"
        )
    if cfg.f_values is not None and np.any(cfg.f_values < 0):
        raise ConfigError("field 'f_values': drives must be non-negative")


def lattice_for(cfg: RunConfig, L: int | None = None) -> LatticeSpec:
    return build_lattice(cfg.lattice, cfg.L if L is None else L)


def params_for(cfg: RunConfig, lattice: LatticeSpec, f: float | None = None,
               u: float | None = None) -> ModelParams:
    """ModelParams with the hopping split as j_hop = zJ / z for this lattice."""
    drive = cfg.f_gamma if f is None else f
    if drive is None:
        raise ConfigError("field 'f_gamma': required (or provide f_values)")
    if lattice.z == 0:
        if cfg.zj_gamma != 0.0:
            raise ConfigError(
                "field 'zj_gamma': must be 0 for a single-site lattice"
            )
        j_hop = 0.0
    else:
        j_hop = cfg.zj_gamma / lattice.z
    return ModelParams(
        delta=cfg.delta_gamma,
        u=cfg.u_gamma if u is None else u,
        f=float(drive),
        j_hop=j_hop,
        z=lattice.z,
    )


def engine_config_for(cfg: RunConfig, seed: int | None = None, context: int = 0,
                      **overrides) -> EngineConfig:
    base = dict(
        dt=cfg.dt,
        t_end=cfg.t_end,
        n_traj=cfg.n_traj,
        seed=cfg.seed if seed is None else seed,
        record_stride=cfg.record_stride,
        scheme=cfg.scheme,
        initial_state=cfg.initial_state,
        alpha0=cfg.alpha0,
        batch_size=cfg.batch_size,
        context=context,
    )
    base.update(overrides)
    return EngineConfig(**base)
