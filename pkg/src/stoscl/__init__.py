"""Simulation and analysis of stochastically forced scalar conservation laws on the torus."""

__version__ = "0.1.0"

from .config import RunConfig, load_config, parse_config, render_config
from .errors import (
    ArgumentError,
    BlowUpError,
    ConfigError,
    EnsembleInvalidError,
    InsufficientDataError,
    IntegrityError,
    NoFitError,
    RangeError,
    StosclError,
)
from .flux import FluxModel, burgers, iota, nondegeneracy_sweep
from .noise import NoiseModel, build_default
from .solver import SolverConfig, State, TorusGrid, pair_run, run

__all__ = [
    "__version__",
    "RunConfig",
    "load_config",
    "parse_config",
    "render_config",
    "ArgumentError",
    "BlowUpError",
    "ConfigError",
    "EnsembleInvalidError",
    "InsufficientDataError",
    "IntegrityError",
    "NoFitError",
    "RangeError",
    "StosclError",
    "FluxModel",
    "burgers",
    "iota",
    "nondegeneracy_sweep",
    "NoiseModel",
    "build_default",
    "SolverConfig",
    "State",
    "TorusGrid",
    "pair_run",
    "run",
]
