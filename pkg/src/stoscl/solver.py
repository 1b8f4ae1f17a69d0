"""Finite-volume time stepping of the viscous approximation on the torus.

The update is a Lie splitting: a monotone conservative step for
``du + div A(u) dt = eta Lap u dt`` followed by the additive Wiener increment.
The time step is ``cfl / (sum_d max|a_d| / dx + 2 eta N / dx**2)`` with
``max|a_d|`` taken over the whole interval spanned by the state, which keeps
the scheme monotone (hence L1-contractive and order preserving) for
``cfl <= 1``.

Everything below works on batches: arrays of shape ``(B, *grid.shape)``
where rows are independent paths, or replicas of a path that share its dt
and its noise.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, BlowUpError
from .flux import FluxModel
from .noise import IncrementStream, NoisePath, _combine

__all__ = [
    "TorusGrid",
    "State",
    "SolverConfig",
    "TrajectoryRecord",
    "PairRecord",
    "stable_dt",
    "step",
    "run",
    "pair_run",
    "integrate",
]

SCHEMES = ("engquist_osher", "lax_friedrichs")


@dataclass(frozen=True)
class TorusGrid:
    N: int
    M: int

    def __post_init__(self):
        if self.N not in (1, 2):
            raise ArgumentError("grid dimension must be 1 or 2")
        if self.M < 8:
            raise ArgumentError("need at least 8 cells per dimension")

    @property
    def dx(self) -> float:
        return 1.0 / self.M

    @property
    def shape(self) -> tuple:
        return (self.M,) * self.N

    @property
    def size(self) -> int:
        return self.M**self.N

    @property
    def coords(self) -> np.ndarray:
        """Cell centres, shape ``(N, *shape)``."""
        x = (np.arange(self.M) + 0.5) * self.dx
        return np.stack(np.meshgrid(*([x] * self.N), indexing="ij"))

    def sample(self, fn) -> np.ndarray:
        """Evaluate ``fn(*coords)`` at cell centres."""
        return np.asarray(fn(*self.coords), dtype=float)


@dataclass
class State:
    grid: TorusGrid
    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ArgumentError(f"state shape {self.values.shape} does not match grid {self.grid.shape}")

    @property
    def mean(self) -> float:
        return float(self.values.mean())

    def lp_norm(self, p: float = 1.0) -> float:
        return float(np.mean(np.abs(self.values) ** p) ** (1.0 / p))


@dataclass(frozen=True)
class SolverConfig:
    """Time-stepping parameters; ``eta=None`` means ``eta = dx``."""

    eta: float | None = None
    cfl: float = 0.9
    flux_scheme: str = "engquist_osher"
    t_end: float = 1.0
    record_every: int = 1

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ArgumentError("; ".join(problems))

    def problems(self):
        out = []
        if self.eta is not None and not self.eta >= 0:
            out.append("eta must be >= 0")
        if not 0 < self.cfl <= 1:
            out.append("cfl must lie in (0, 1]")
        if self.flux_scheme not in SCHEMES:
            out.append(f"flux_scheme must be one of {SCHEMES}")
        if not self.t_end >= 0:
            out.append("t_end must be >= 0")
        if int(self.record_every) < 1:
            out.append("record_every must be >= 1")
        return out

    def viscosity(self, grid: TorusGrid) -> float:
        return grid.dx if self.eta is None else float(self.eta)


class _Scheme:
    """Deterministic conservative update for a fixed flux, grid and viscosity."""

    def __init__(self, flux: FluxModel, grid: TorusGrid, eta: float, kind: str):
        if flux.dim != grid.N:
            raise ArgumentError("flux dimension does not match grid dimension")
        self.flux, self.grid, self.eta, self.kind = flux, grid, eta, kind
        self.split = [flux.eo_split(d) for d in range(grid.N)]

    def speeds(self, lo, hi):
        return [self.flux.max_speed(lo, hi, d) for d in range(self.grid.N)]

    def dt_bound(self, u, cfl, groups=1):
        """Stable dt per group of ``groups`` consecutive rows."""
        b = u.reshape(-1, groups * self.grid.size)
        lo, hi = b.min(axis=1), b.max(axis=1)
        rate = sum(self.speeds(lo, hi)) / self.grid.dx + 2 * self.eta * self.grid.N / self.grid.dx**2
        with np.errstate(divide="ignore"):
            return np.where(rate > 0, cfl / np.where(rate > 0, rate, 1.0), np.inf)

    def update(self, u, dt, groups=1):
        """One step of size ``dt`` (shape ``(B,)``) applied to ``u`` ``(B, *shape)``.

        Rows in a group of ``groups`` consecutive rows share the
        Lax-Friedrichs dissipation coefficient, so the update is one
        monotone operator for all of them. Non-finite results are left for
        the caller's blow-up check.
        """
        with np.errstate(over="ignore", invalid="ignore"):
            return self._update(u, dt, groups)

    def _update(self, u, dt, groups):
        N, dx = self.grid.N, self.grid.dx
        lam = dt.reshape((-1,) + (1,) * N) / dx
        nu = lam * self.eta / dx
        for d in range(N):
            axis = d + 1
            right = np.roll(u, -1, axis=axis)
            if self.kind == "engquist_osher":
                Ap = self.split[d][0](u)
                F = Ap + np.roll(self.flux.A(u, d) - Ap, -1, axis=axis)
            else:
                b = u.reshape(-1, groups * self.grid.size)
                alpha = self.flux.max_speed(b.min(axis=1), b.max(axis=1), d)
                alpha = np.repeat(alpha, groups).reshape((-1,) + (1,) * N)
                F = 0.5 * (self.flux.A(u, d) + self.flux.A(right, d)) - 0.5 * alpha * (right - u)
            left = np.roll(u, 1, axis=axis)
            u = u - lam * (F - np.roll(F, 1, axis=axis)) + nu * (right - 2 * u + left)
        return u


def stable_dt(state: State, cfg: SolverConfig, flux: FluxModel) -> float:
    """The adaptive time step used for ``state``."""
    sch = _Scheme(flux, state.grid, cfg.viscosity(state.grid), cfg.flux_scheme)
    return float(sch.dt_bound(state.values[None], cfg.cfl)[0])


def step(state: State, cfg: SolverConfig, flux: FluxModel, noise_increment=None,
         dt: float | None = None, step_index: int = 0) -> State:
    """Advance one step: conservative update, then the additive increment.

    ``dt`` defaults to :func:`stable_dt`; an increment must have been sampled
    with the same ``dt``.
    """
    sch = _Scheme(flux, state.grid, cfg.viscosity(state.grid), cfg.flux_scheme)
    if dt is None:
        dt = float(sch.dt_bound(state.values[None], cfg.cfl)[0])
        if not np.isfinite(dt):
            raise ArgumentError("no stable dt: pass dt explicitly for a flux-free, inviscid step")
    new = sch.update(state.values[None], np.array([dt]))[0]
    if noise_increment is not None:
        new = new + noise_increment
    if not np.all(np.isfinite(new)):
        raise BlowUpError(step_index)
    return State(state.grid, new, state.time + dt)


@dataclass
class StepEvent:
    """What an observer sees after every step of a batch."""

    step: int
    t: np.ndarray       # (P,) time before the step
    dt: np.ndarray      # (P,) zero for finished or blown-up paths
    u_pre: np.ndarray   # (P*R, *shape) before the step
    u_mid: np.ndarray   # after the deterministic part, before the noise
    u_post: np.ndarray  # after the step
    incr: np.ndarray    # (P, *shape) noise increments


def integrate(u, grid: TorusGrid, flux: FluxModel, cfg: SolverConfig, paths=None,
              replicas: int = 1, observers=(), t_end: float | None = None,
              raise_on_blowup: bool = True, hash_increments: bool = False):
    """Advance a batch of ``P * replicas`` states to ``t_end``.

    Parameters
    ----------
    u : ndarray, shape ``(P * replicas, *grid.shape)``
        Rows ``p * replicas .. p * replicas + replicas - 1`` belong to path p
        and share its time step and noise.
    paths : list of NoisePath or None
        One per path; ``None`` means no forcing.
    observers : iterable
        Objects with an ``on_step(event)`` method.

    Returns
    -------
    u : ndarray
        Final states.
    info : dict
        ``steps``, ``blown`` (bool per path), ``blowup_step`` (int per path, -1 if
        fine) and ``increment_hash`` (hex digest per path).
    """
    t_end = cfg.t_end if t_end is None else t_end
    R = replicas
    u = np.array(u, dtype=float)
    P = u.shape[0] // R
    if u.shape != (P * R,) + grid.shape:
        raise ArgumentError("batch shape does not match grid")
    sch = _Scheme(flux, grid, cfg.viscosity(grid), cfg.flux_scheme)
    streams = None
    basis = None
    if paths is not None:
        if len(paths) != P:
            raise ArgumentError("need one noise path per batch path")
        basis = paths[0].model.basis(grid)
        streams = [IncrementStream(p) for p in paths]
    hashes = [hashlib.sha256() for _ in range(P)]
    t = np.zeros(P)
    blown = np.zeros(P, dtype=bool)
    blowup_step = np.full(P, -1)
    tol = 1e-12 * max(1.0, t_end)
    n = 0
    while True:
        remaining = t_end - t
        active = (remaining > tol) & ~blown
        if not active.any():
            break
        dt = sch.dt_bound(u, cfg.cfl, R)
        dt = np.where(active, np.minimum(dt, remaining), 0.0)
        if not np.all(np.isfinite(dt)):
            dt = np.where(np.isfinite(dt), dt, remaining)
        rows_dt = np.repeat(dt, R)
        mid = sch.update(u, rows_dt, R)
        if streams is not None and basis.shape[0]:
            z = np.stack([s.at(n) for s in streams])
            incr = _combine(z, dt, basis)
            if hash_increments:
                for p in np.flatnonzero(active):
                    hashes[p].update(incr[p].tobytes())
            new = mid + np.repeat(incr, R, axis=0)
        else:
            incr = np.zeros((P,) + grid.shape)
            new = mid
        bad = ~np.isfinite(new.reshape(P, -1)).all(axis=1)
        if bad.any():
            if raise_on_blowup:
                raise BlowUpError(n)
            blown |= bad
            blowup_step[bad] = n
            rows_bad = np.repeat(bad, R)
            new[rows_bad] = 0.0
            mid[rows_bad] = 0.0
            dt = np.where(bad, 0.0, dt)
        ev = StepEvent(n, t.copy(), dt, u, mid, new, incr)
        for ob in observers:
            ob.on_step(ev)
        u = new
        t = t + dt
        n += 1
    return u, {
        "steps": n,
        "blown": blown,
        "blowup_step": blowup_step,
        "increment_hash": [h.hexdigest() for h in hashes],
        "t": t,
    }


@dataclass
class TrajectoryRecord:
    times: list = field(default_factory=list)
    observables: dict = field(default_factory=dict)
    final: State | None = None
    steps: int = 0
    snapshots: list = field(default_factory=list)   # per recorded time, if requested
    step_dts: list = field(default_factory=list)
    increment_hash: str = ""
    eta: float = 0.0
    config: SolverConfig | None = None

    def series(self, name):
        return np.asarray(self.observables[name])


def _scalar_obs(values, grid):
    v = values.reshape(-1)
    return {
        "mean": float(v.mean()),
        "L1": float(np.mean(np.abs(v))),
        "L2": float(np.sqrt(np.mean(v * v))),
        "min": float(v.min()),
        "max": float(v.max()),
    }


class _Recorder:
    def __init__(self, grid, every, observers, keep):
        self.grid, self.every, self.observers, self.keep = grid, every, observers, keep
        self.rec = TrajectoryRecord()

    def record(self, state):
        self.rec.times.append(state.time)
        obs = _scalar_obs(state.values, self.grid)
        for ob in self.observers:
            fn = getattr(ob, "record", None)
            if fn is not None:
                obs.update(fn(state))
        for k, v in obs.items():
            self.rec.observables.setdefault(k, []).append(v)
        if self.keep:
            self.rec.snapshots.append(state.values.copy())

    def on_step(self, ev):
        for ob in self.observers:
            fn = getattr(ob, "on_step", None)
            if fn is not None:
                fn(ev)
        if ev.dt[0] > 0:
            self.rec.step_dts.append(float(ev.dt[0]))
        n = ev.step + 1
        if n % self.every == 0:
            t = self.t0 + float(ev.t[0] + ev.dt[0])
            self.record(State(self.grid, ev.u_post[0].copy(), t))


def run(u0: State, cfg: SolverConfig, flux: FluxModel, path: NoisePath | None = None,
        observers=(), snapshots: bool = False) -> TrajectoryRecord:
    """Advance ``u0`` to ``cfg.t_end``, recording every ``cfg.record_every`` steps.

    Built-in observables per record: mean, L1, L2, min, max. Observers may
    add ``on_step(event)`` (called every step) and ``record(state) -> dict``
    (called at record points). The final state is always recorded.
    """
    rec_obj = _Recorder(u0.grid, int(cfg.record_every), list(observers), snapshots)
    rec_obj.t0 = u0.time
    rec_obj.record(u0)
    u, info = integrate(u0.values[None], u0.grid, flux, cfg, None if path is None else [path],
                        observers=[rec_obj], t_end=cfg.t_end, hash_increments=True)
    rec = rec_obj.rec
    final = State(u0.grid, u[0], u0.time + float(info["t"][0]))
    if rec.times[-1] != final.time:
        rec_obj.record(final)
    rec.final = final
    rec.steps = info["steps"]
    rec.increment_hash = info["increment_hash"][0]
    rec.eta = cfg.viscosity(u0.grid)
    rec.config = cfg
    return rec


@dataclass
class PairRecord:
    times: list
    l1_diff: list
    final_a: State
    final_b: State
    steps: int


class _PairRecorder:
    def __init__(self, every, dx_measure):
        self.every = every
        self.times, self.diff = [], []
        self.w = dx_measure

    def on_step(self, ev):
        n = ev.step + 1
        if n % self.every == 0 and ev.dt[0] > 0:
            self.times.append(float(ev.t[0] + ev.dt[0]))
            self.diff.append(float(np.mean(np.abs(ev.u_post[0] - ev.u_post[1]))))


def pair_run(u0a: State, u0b: State, cfg: SolverConfig, flux: FluxModel,
             path: NoisePath | None = None) -> PairRecord:
    """Advance two states with one shared dt sequence and identical increments."""
    if u0a.grid != u0b.grid:
        raise ArgumentError("pair_run needs both states on the same grid")
    rec = _PairRecorder(int(cfg.record_every), u0a.grid.dx)
    rec.times.append(u0a.time)
    rec.diff.append(float(np.mean(np.abs(u0a.values - u0b.values))))
    u, info = integrate(np.stack([u0a.values, u0b.values]), u0a.grid, flux, cfg,
                        None if path is None else [path], replicas=2, observers=[rec])
    t = u0a.time + float(info["t"][0])
    if not rec.times or rec.times[-1] != t:
        rec.times.append(t)
        rec.diff.append(float(np.mean(np.abs(u[0] - u[1]))))
    return PairRecord(rec.times, rec.diff, State(u0a.grid, u[0], t), State(u0a.grid, u[1], t), info["steps"])
