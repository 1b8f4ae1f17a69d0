"""Sectioned TOML run configuration with full validation.

Every problem found is reported at once, each prefixed by its
``section.key`` path. Unknown sections and keys are errors.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import tomli
import tomli_w

from .ensemble import OBSERVABLES, EnsembleConfig
from .errors import ArgumentError, ConfigError
from .flux import FluxModel, burgers
from .noise import NoiseModel, build_default
from .solver import SCHEMES, SolverConfig, State, TorusGrid
from .spectral import SemigroupParams

__all__ = ["RunConfig", "parse_config", "render_config", "load_config"]


@dataclass(frozen=True)
class FluxBlock:
    preset: str = ""            # "burgers" or "" (then coeffs is used)
    coeffs: tuple = ()          # one coefficient list per dimension, constant term first
    xi_max: float = 10.0
    eps_samples: tuple = (1e-3, 2e-3, 5e-3, 1e-2, 2e-2, 5e-2, 1e-1)
    n_xi: int = 20001
    n_beta: int = 64


@dataclass(frozen=True)
class NoiseBlock:
    K: int = 8
    decay_exponent: float = 2.0
    D0: float | None = None      # rescale so sup G^2 equals this


@dataclass(frozen=True)
class GridBlock:
    N: int = 1
    M: int = 256


@dataclass(frozen=True)
class SolverBlock:
    eta: float | None = None
    cfl: float = 0.9
    flux_scheme: str = "engquist_osher"
    t_end: float = 1.0
    record_every: int = 1


@dataclass(frozen=True)
class InitialBlock:
    kind: str = "sine"          # "zero" | "sine"
    amplitude: float = 1.0


@dataclass(frozen=True)
class EnsembleBlock:
    paths: int = 16
    burn_in: float = 50.0
    horizon: float = 250.0
    observables: tuple = ("L1", "L2")
    r_exponent: float = 2.4
    sample_interval: float = 0.1
    bins: int = 64
    hist_max: float = 8.0


@dataclass(frozen=True)
class DecompositionBlock:
    gamma: float = 1.0
    delta: float = 1.0
    alpha: float = 0.5
    J: int = 256
    output_every: int = 10


_BLOCKS = {
    "flux": FluxBlock,
    "noise": NoiseBlock,
    "grid": GridBlock,
    "solver": SolverBlock,
    "initial": InitialBlock,
    "ensemble": EnsembleBlock,
    "decomposition": DecompositionBlock,
}
_REQUIRED = ("flux",)
_TOP = {"seed_root": int, "output_dir": str}


@dataclass(frozen=True)
class RunConfig:
    flux: FluxBlock = field(default_factory=FluxBlock)
    noise: NoiseBlock = field(default_factory=NoiseBlock)
    grid: GridBlock = field(default_factory=GridBlock)
    solver: SolverBlock = field(default_factory=SolverBlock)
    initial: InitialBlock = field(default_factory=InitialBlock)
    ensemble: EnsembleBlock = field(default_factory=EnsembleBlock)
    decomposition: DecompositionBlock = field(default_factory=DecompositionBlock)
    seed_root: int = 0
    output_dir: str = "out"

    # --- builders ------------------------------------------------------
    def build_flux(self) -> FluxModel:
        f = self.flux
        if f.preset == "burgers":
            return burgers(f.xi_max)
        coeffs = f.coeffs[0] if len(f.coeffs) == 1 else f.coeffs
        return FluxModel(coeffs, f.xi_max)

    def build_grid(self) -> TorusGrid:
        return TorusGrid(self.grid.N, self.grid.M)

    def build_noise(self) -> NoiseModel:
        n = self.noise
        if n.K == 0:
            return NoiseModel((), self.seed_root, self.grid.N)
        return build_default(n.K, n.decay_exponent, self.grid.N, self.seed_root, n.D0)

    def solver_config(self) -> SolverConfig:
        s = self.solver
        return SolverConfig(s.eta, s.cfl, s.flux_scheme, s.t_end, s.record_every)

    def ensemble_config(self, workers: int = 1) -> EnsembleConfig:
        e = self.ensemble
        return EnsembleConfig(e.paths, e.burn_in, e.horizon, e.observables, e.r_exponent,
                              e.sample_interval, workers, e.bins, e.hist_max)

    def semigroup(self) -> SemigroupParams:
        d = self.decomposition
        return SemigroupParams(d.gamma, d.delta, d.alpha)

    def initial_state(self, grid: TorusGrid) -> State:
        if self.initial.kind == "zero":
            return State(grid, np.zeros(grid.shape))
        return State(grid, grid.sample(lambda *x: self.initial.amplitude * np.sin(2 * np.pi * x[0])))


# --- type checking -------------------------------------------------------

def _expected(block_cls):
    """Field name -> default value of a block."""
    return {f.name: f.default for f in fields(block_cls)}


def _is_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _coerce(path, value, default, problems, optional=False):
    """Check ``value`` against the type of ``default``; return the coerced value."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            problems.append(f"{path}: expected a boolean")
        return value
    if isinstance(default, int) and not optional:
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{path}: expected an integer")
            return default
        return value
    if isinstance(default, float) or optional:
        if not _is_number(value):
            problems.append(f"{path}: expected a number")
            return default
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            problems.append(f"{path}: expected a string")
            return default
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            problems.append(f"{path}: expected a list")
            return default
        return _tuplify(value)
    return value


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, list) else v


_OPTIONAL = {("noise", "D0"), ("solver", "eta")}


def _check_block(name, values, problems):
    """Constraint checks mirroring the module preconditions."""
    p = lambda key, msg: problems.append(f"{name}.{key}: {msg}")  # noqa: E731
    if name == "flux":
        if values.preset not in ("", "burgers"):
            p("preset", "must be 'burgers' or omitted")
        if not values.preset:
            c = values.coeffs
            if not c:
                p("coeffs", "give coefficients or preset = 'burgers'")
            else:
                rows = c if isinstance(c[0], tuple) else (c,)
                if not all(isinstance(r, tuple) and all(_is_number(x) for x in r) for r in rows):
                    p("coeffs", "must be a list of numbers or a list of such lists")
        if not values.xi_max > 0:
            p("xi_max", "must be positive")
        if not all(_is_number(e) and e > 0 for e in values.eps_samples):
            p("eps_samples", "must be positive numbers")
        if values.n_xi < 3:
            p("n_xi", "must be >= 3")
        if values.n_beta < 1:
            p("n_beta", "must be >= 1")
    elif name == "noise":
        if values.K < 0 or values.K % 2:
            p("K", "must be an even integer >= 0")
        if values.D0 is not None and not values.D0 >= 0:
            p("D0", "must be >= 0")
    elif name == "grid":
        if values.N not in (1, 2):
            p("N", "must be 1 or 2")
        if values.M < 8:
            p("M", "must be >= 8")
    elif name == "solver":
        if values.eta is not None and not values.eta >= 0:
            p("eta", "must be >= 0")
        if not 0 < values.cfl <= 1:
            p("cfl", "must lie in (0, 1]")
        if values.flux_scheme not in SCHEMES:
            p("flux_scheme", f"must be one of {list(SCHEMES)}")
        if not values.t_end > 0:
            p("t_end", "must be positive")
        if values.record_every < 1:
            p("record_every", "must be >= 1")
    elif name == "initial":
        if values.kind not in ("zero", "sine"):
            p("kind", "must be 'zero' or 'sine'")
        if not math.isfinite(values.amplitude):
            p("amplitude", "must be finite")
    elif name == "ensemble":
        if values.paths < 2:
            p("paths", "must be >= 2")
        if not 0 <= values.burn_in < values.horizon:
            p("burn_in", "must satisfy 0 <= burn_in < horizon")
        bad = [o for o in values.observables if o not in OBSERVABLES]
        if bad:
            p("observables", f"unknown {bad}; choose from {list(OBSERVABLES)}")
        if not values.r_exponent >= 1:
            p("r_exponent", "must be >= 1")
        if not values.sample_interval > 0:
            p("sample_interval", "must be positive")
        if values.bins < 1:
            p("bins", "must be >= 1")
        if not values.hist_max > 0:
            p("hist_max", "must be positive")
    elif name == "decomposition":
        if not values.gamma >= 0:
            p("gamma", "must be >= 0")
        if not values.delta >= 0:
            p("delta", "must be >= 0")
        if not 0 < values.alpha <= 1:
            p("alpha", "must lie in (0, 1]")
        if values.J < 2:
            p("J", "must be >= 2")
        if values.output_every < 1:
            p("output_every", "must be >= 1")


def parse_config(text: str) -> RunConfig:
    """Parse and validate; raises :class:`ConfigError` listing every problem."""
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError([f"syntax: {exc}"]) from None
    problems = []
    kwargs = {}
    for key, value in raw.items():
        if key in _BLOCKS:
            if not isinstance(value, dict):
                problems.append(f"{key}: expected a section")
            continue
        if key not in _TOP:
            problems.append(f"{key}: unknown key")
            continue
        typ = _TOP[key]
        if typ is int and (isinstance(value, bool) or not isinstance(value, int)):
            problems.append(f"{key}: expected an integer")
        elif typ is str and not isinstance(value, str):
            problems.append(f"{key}: expected a string")
        else:
            kwargs[key] = value
    for name in _REQUIRED:
        if name not in raw:
            problems.append(f"{name}: missing required section")
    for name, cls in _BLOCKS.items():
        if name in _REQUIRED and name not in raw:
            continue
        sec = raw.get(name, {})
        if not isinstance(sec, dict):
            continue
        defaults = _expected(cls)
        vals = {}
        for key, value in sec.items():
            if key not in defaults:
                problems.append(f"{name}.{key}: unknown key")
                continue
            vals[key] = _coerce(f"{name}.{key}", value, defaults[key], problems, (name, key) in _OPTIONAL)
        block = cls(**vals)
        _check_block(name, block, problems)
        kwargs[name] = block
    if "seed_root" in kwargs and not 0 <= kwargs["seed_root"] < 2**64:
        problems.append("seed_root: must fit in 64 bits")
    if problems:
        raise ConfigError(problems)
    cfg = RunConfig(**kwargs)
    # final cross-check against the modules themselves
    try:
        flux = cfg.build_flux()
        if flux.dim != cfg.grid.N:
            problems.append("flux.coeffs: number of components must equal grid.N")
        cfg.build_noise()
    except (ArgumentError, TypeError, ValueError) as exc:
        problems.append(f"flux/noise: {exc}")
    if problems:
        raise ConfigError(problems)
    return cfg


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


def render_config(cfg: RunConfig) -> str:
    """TOML text that parses back to ``cfg``; ``None`` values are omitted."""
    out = {"seed_root": cfg.seed_root, "output_dir": cfg.output_dir}
    for name in _BLOCKS:
        block = asdict(getattr(cfg, name))
        out[name] = {k: _plain(v) for k, v in block.items() if v is not None and v != "" and v != ()}
    return tomli_w.dumps(out)


def load_config(path) -> RunConfig:
    with open(path, "rb") as fh:
        return parse_config(fh.read().decode("utf-8"))
