"""Simulation and analysis toolkit for the driven-dissipative Bose-Hubbard
model on periodic 1D and 2D lattices: truncated-Wigner trajectory ensembles,
mean-field bistability, an exact Lindblad oracle for small systems, and
critical-slowing-down analysis (gap extraction and finite-size power laws)."""

__version__ = "0.1.0"

from .model import FieldState, LatticeSpec, ModelParams, build_lattice, drift
from .meanfield import MeanFieldBranch, meanfield_roots, meanfield_sweep
from .engine import EngineConfig, EnsembleResult, TrajectoryRecord, run_ensemble
from .observables import (
    ObservableSeries,
    PopulationHistogram,
    condensate_fraction,
    g2_local,
    histogram_p_of_n,
    population,
)
from .lindblad import (
    DensityMatrix,
    FockBasis,
    build_liouvillian_action,
    evolve,
    expectation,
    steady_state,
)
from .fitting import ExpFit, PowerLawFit, fit_exponential, fit_power_law, gap_vs_drive

__all__ = [
    "__version__",
    "FieldState", "LatticeSpec", "ModelParams", "build_lattice", "drift",
    "MeanFieldBranch", "meanfield_roots", "meanfield_sweep",
    "EngineConfig", "EnsembleResult", "TrajectoryRecord", "run_ensemble",
    "ObservableSeries", "PopulationHistogram", "condensate_fraction",
    "g2_local", "histogram_p_of_n", "population",
    "DensityMatrix", "FockBasis", "build_liouvillian_action", "evolve",
    "expectation", "steady_state",
    "ExpFit", "PowerLawFit", "fit_exponential", "fit_power_law", "gap_vs_drive",
]
