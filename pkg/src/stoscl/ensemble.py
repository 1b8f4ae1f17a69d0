"""Path ensembles: time-averaged empirical measures, coupling, hitting times.

Paths are split into contiguous chunks, each advanced as one batch (in a
worker process when ``workers > 1``). Every row of a batch is bitwise
independent of the others, and chunk results are merged in path-index
order, so statistics do not depend on the worker count.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, EnsembleInvalidError
from .flux import FluxModel, classify_growth
from .kinetic import KineticHistogram, KineticRecorder, grad_sq, merge_all
from .noise import IncrementStream, NoiseModel
from .solver import SolverConfig, TorusGrid, integrate

__all__ = [
    "OBSERVABLES",
    "EnsembleConfig",
    "EmpiricalMeasure",
    "HittingRecord",
    "CouplingRecord",
    "SmallNoiseReport",
    "run_ensemble",
    "moment_report",
    "coupling_experiment",
    "hitting_times",
    "small_noise_experiment",
    "krylov_bogoliubov_check",
    "zero_initial",
    "sine_initial",
]

OBSERVABLES = ("L1", "L2", "Lr", "min", "max", "dissipation_rate", "gradient_L2")


@dataclass(frozen=True)
class EnsembleConfig:
    """Ensemble layout; observables are sampled every ``sample_interval`` time units."""

    paths: int = 16
    burn_in: float = 50.0
    horizon: float = 250.0
    observables: tuple = ("L1", "L2")
    r_exponent: float = 2.4
    sample_interval: float = 0.1
    workers: int = 1
    bins: int = 64
    hist_max: float = 8.0

    def __post_init__(self):
        object.__setattr__(self, "observables", tuple(self.observables))
        problems = self.problems()
        if problems:
            raise ArgumentError("; ".join(problems))

    def problems(self):
        out = []
        if int(self.paths) < 2:
            out.append("paths must be >= 2")
        if not 0 <= self.burn_in < self.horizon:
            out.append("need 0 <= burn_in < horizon")
        bad = [o for o in self.observables if o not in OBSERVABLES]
        if bad:
            out.append(f"unknown observables {bad}; choose from {OBSERVABLES}")
        if not self.r_exponent >= 1:
            out.append("r_exponent must be >= 1")
        if not self.sample_interval > 0:
            out.append("sample_interval must be positive")
        if int(self.workers) < 1:
            out.append("workers must be >= 1")
        if int(self.bins) < 1 or not self.hist_max > 0:
            out.append("bins must be >= 1 and hist_max > 0")
        return out


def zero_initial(path_index, grid):
    return np.zeros(grid.shape)


@dataclass(frozen=True)
class sine_initial:
    """``amplitude * sin(2 pi x_1)`` for every path."""

    amplitude: float = 1.0

    def __call__(self, path_index, grid):
        return self.amplitude * np.sin(2 * np.pi * grid.coords[0])


# --- probes: solver observers that also produce per-path results ----------

def _observables(u, grid, eta, names, r):
    """Rows of ``u`` are states; returns ``{name: (rows,)}``; ``mean`` always included."""
    axes = tuple(range(1, u.ndim))
    a = np.abs(u)
    out = {"mean": u.mean(axis=axes)}
    if "L1" in names:
        out["L1"] = a.mean(axis=axes)
    if "L2" in names:
        out["L2"] = np.sqrt((u * u).mean(axis=axes))
    if "Lr" in names:
        out["Lr"] = (a**r).mean(axis=axes) ** (1 / r)
    if "min" in names:
        out["min"] = u.min(axis=axes)
    if "max" in names:
        out["max"] = u.max(axis=axes)
    if "dissipation_rate" in names or "gradient_L2" in names:
        g2 = grad_sq(u, grid.dx, grid.N).mean(axis=axes)
        out["dissipation_rate"] = eta * g2
        out["gradient_L2"] = np.sqrt(g2)
    return {k: v for k, v in out.items() if k == "mean" or k in names}


class _Sampler:
    """Observables of replica 0 on the time grid ``k * interval``."""

    def __init__(self, grid, eta, n_paths, names, r, interval, t_end, replicas, u0):
        self.grid, self.eta, self.names, self.r, self.R = grid, eta, names, r, replicas
        self.n = int(math.floor(t_end / interval + 1e-9)) + 1
        self.times = interval * np.arange(self.n)
        self.data = {k: np.full((n_paths, self.n), np.nan) for k in ("mean",) + tuple(names)}
        for k, v in _observables(u0[::replicas], grid, eta, names, r).items():
            self.data[k][:, 0] = v
        self.next = np.ones(n_paths, dtype=int)

    def on_step(self, ev):
        t_post = ev.t + ev.dt
        idx = np.minimum(self.next, self.n - 1)
        hit = (ev.dt > 0) & (self.next < self.n) & (t_post >= self.times[idx] - 1e-9)
        if not hit.any():
            return
        rows = np.flatnonzero(hit)
        vals = _observables(ev.u_post[:: self.R][rows], self.grid, self.eta, self.names, self.r)
        # a long step may cover several grid times; each gets the post-step value
        for i, p in enumerate(rows):
            while self.next[p] < self.n and t_post[p] >= self.times[self.next[p]] - 1e-9:
                for k, v in vals.items():
                    self.data[k][p, self.next[p]] = v[i]
                self.next[p] += 1

    def result(self, p):
        return {k: v[p] for k, v in self.data.items()}


class _PairProbe:
    """``||u^1 - u^2||_1`` on the time grid plus at every step (for the hitting time)."""

    def __init__(self, n_paths, interval, t_end, u0, kappa=None):
        self.n = int(math.floor(t_end / interval + 1e-9)) + 1
        self.times = interval * np.arange(self.n)
        self.diff = np.full((n_paths, self.n), np.nan)
        a, b = u0[0::2], u0[1::2]
        axes = tuple(range(1, a.ndim))
        self.diff[:, 0] = np.abs(a - b).mean(axis=axes)
        self.next = np.ones(n_paths, dtype=int)
        self.kappa = kappa
        self.hit = np.full(n_paths, np.inf)
        if kappa is not None:
            inside = np.abs(a).mean(axis=axes) + np.abs(b).mean(axis=axes) <= 2 * kappa
            self.hit[inside] = 0.0

    def on_step(self, ev):
        live = ev.dt > 0
        if not live.any():
            return
        a, b = ev.u_post[0::2], ev.u_post[1::2]
        axes = tuple(range(1, a.ndim))
        t_post = ev.t + ev.dt
        if self.kappa is not None:
            s = np.abs(a).mean(axis=axes) + np.abs(b).mean(axis=axes)
            new = live & np.isinf(self.hit) & (s <= 2 * self.kappa)
            self.hit[new] = t_post[new]
        due = live & (self.next < self.n) & (t_post >= self.times[np.minimum(self.next, self.n - 1)] - 1e-9)
        if due.any():
            d = np.abs(a - b).mean(axis=axes)
            for p in np.flatnonzero(due):
                while self.next[p] < self.n and t_post[p] >= self.times[self.next[p]] - 1e-9:
                    self.diff[p, self.next[p]] = d[p]
                    self.next[p] += 1

    def result(self, p):
        return {"diff": self.diff[p], "hit": self.hit[p]}


class _NoiseSup:
    """Running ``sup_t ||W(t)||_{W^{1,inf}}`` of the accumulated forcing, from the mode sums."""

    def __init__(self, noise, grid, n_paths, streams):
        x = grid.coords
        self.basis = noise.basis(grid)
        grads = []
        for m in noise.modes:
            phase = 2 * np.pi * sum(n * xd for n, xd in zip(m.wavevector, x))
            dtrig = -np.sin(phase) if m.parity == "cos" else np.cos(phase)
            grads.append([2 * np.pi * n * m.amplitude * dtrig for n in m.wavevector])
        self.grad = np.asarray(grads)  # (K, N, *shape)
        self.beta = np.zeros((n_paths, noise.K))
        self.sup = np.zeros(n_paths)
        self.noise = noise
        self.streams = streams

    def on_step(self, ev):
        live = ev.dt > 0
        if not live.any() or not self.noise.K:
            return
        z = np.stack([s.at(ev.step) for s in self.streams])
        self.beta += np.where(live[:, None], z * np.sqrt(ev.dt)[:, None], 0.0)
        W = np.tensordot(self.beta, self.basis, axes=1)
        gW = np.tensordot(self.beta, self.grad, axes=1)
        axes = tuple(range(1, W.ndim))
        w_sup = np.max(np.abs(W - W.mean(axis=axes, keepdims=True)), axis=axes)
        g_sup = np.max(np.abs(gW).reshape(len(W), -1), axis=1)
        self.sup = np.maximum(self.sup, np.maximum(w_sup, g_sup))

    def result(self, p):
        return {"sup": self.sup[p]}


@dataclass
class _Job:
    grid: TorusGrid
    flux: FluxModel
    solver: SolverConfig
    noise: NoiseModel | None
    path_indices: list
    u0: np.ndarray
    replicas: int
    t_end: float
    probes: dict


def _run_job(job: _Job):
    P = len(job.path_indices)
    eta = job.solver.viscosity(job.grid)
    paths = None if job.noise is None else [job.noise.path(i) for i in job.path_indices]
    obs = {}
    for name, kw in job.probes.items():
        if name == "sampler":
            obs[name] = _Sampler(job.grid, eta, P, kw["names"], kw["r"], kw["interval"], job.t_end,
                                 job.replicas, job.u0)
        elif name == "kinetic":
            G2 = None if job.noise is None else job.noise.G2(job.grid.coords)
            obs[name] = KineticRecorder(job.grid, eta, P, G2, job.replicas, **kw)
        elif name == "pair":
            obs[name] = _PairProbe(P, kw["interval"], job.t_end, job.u0, kw.get("kappa"))
        elif name == "noise_sup":
            obs[name] = _NoiseSup(job.noise, job.grid, P, [IncrementStream(p) for p in paths])
        else:
            raise ArgumentError(f"unknown probe {name}")
    u, info = integrate(job.u0, job.grid, job.flux, job.solver, paths, replicas=job.replicas,
                        observers=list(obs.values()), t_end=job.t_end, raise_on_blowup=False)
    per_path = []
    for p in range(P):
        row = {"blown": bool(info["blown"][p]), "blowup_step": int(info["blowup_step"][p])}
        for name, ob in obs.items():
            row[name] = ob.histogram(p) if name == "kinetic" else ob.result(p)
        row["final"] = u[p * job.replicas:(p + 1) * job.replicas]
        per_path.append(row)
    return per_path


def _run_paths(grid, flux, solver, noise, u0_rows, replicas, t_end, probes, workers):
    """Run all paths (rows grouped by ``replicas``) and return per-path results in order."""
    P = u0_rows.shape[0] // replicas
    workers = max(1, min(int(workers), P))
    bounds = np.linspace(0, P, workers + 1).astype(int)
    jobs = [_Job(grid, flux, solver, noise, list(range(lo, hi)), u0_rows[lo * replicas:hi * replicas],
                 replicas, t_end, probes) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
    if len(jobs) == 1:
        chunks = [_run_job(jobs[0])]
    else:
        with ProcessPoolExecutor(max_workers=len(jobs)) as pool:
            chunks = list(pool.map(_run_job, jobs))
    return [row for chunk in chunks for row in chunk]


def _check_blown(rows):
    n = sum(r["blown"] for r in rows)
    if n > 0.1 * len(rows):
        raise EnsembleInvalidError(f"{n} of {len(rows)} paths blew up")
    return n


# --- empirical measure ---------------------------------------------------

@dataclass
class EmpiricalMeasure:
    """Samples of each observable per path and time plus fixed-edge histograms.

    ``counts[name]`` is the histogram of post-burn-in samples of all valid
    paths; values outside the edges are counted in the end bins.
    """

    times: np.ndarray
    burn_in: float
    samples: dict
    valid: np.ndarray
    edges: dict
    counts: dict
    r_exponent: float = 2.4
    kinetic: KineticHistogram | None = None
    n_blown: int = 0

    @property
    def post(self) -> np.ndarray:
        return self.times >= self.burn_in - 1e-9

    def values(self, name, post=True) -> np.ndarray:
        """``(valid paths, times)`` samples, post-burn-in by default."""
        v = self.samples[name][self.valid]
        return v[:, self.post] if post else v

    def time_average(self, name):
        """Mean over paths and post-burn-in times; stderr from the spread of path means."""
        v = self.values(name)
        pm = v.mean(axis=1)
        se = pm.std(ddof=1) / math.sqrt(len(pm)) if len(pm) > 1 else math.nan
        return float(v.mean()), float(se), int(v.size)

    def path_average(self, name, index=-1):
        """Mean and stderr over paths at one sample time."""
        v = self.samples[name][self.valid][:, index]
        return float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v))), int(v.size)

    def summary(self):
        """Rows ``(observable, mean, stderr, n)`` of the time-averaged measure."""
        return [(k, *self.time_average(k)) for k in self.samples]


def _edges(name, bins, hist_max):
    lo = -hist_max if name in ("min", "max", "mean") else 0.0
    return np.linspace(lo, hist_max, bins + 1)


def _histogram(v, edges):
    idx = np.clip(np.searchsorted(edges, v, side="right") - 1, 0, len(edges) - 2)
    return np.bincount(idx.ravel(), minlength=len(edges) - 1)


def run_ensemble(cfg: EnsembleConfig, solver: SolverConfig, noise: NoiseModel | None, u0_generator,
                 grid: TorusGrid, flux: FluxModel, kinetic: dict | None = None) -> EmpiricalMeasure:
    """Advance ``cfg.paths`` independent paths to ``cfg.horizon`` and collect statistics.

    Path ``i`` uses noise stream ``i``. With ``kinetic`` (keyword arguments of
    :class:`KineticRecorder`) the merged kinetic histogram is attached.
    """
    u0 = np.stack([np.asarray(u0_generator(i, grid), dtype=float) for i in range(cfg.paths)])
    probes = {"sampler": {"names": cfg.observables, "r": cfg.r_exponent, "interval": cfg.sample_interval}}
    if kinetic is not None:
        probes["kinetic"] = dict(kinetic)
    rows = _run_paths(grid, flux, solver, noise, u0, 1, cfg.horizon, probes, cfg.workers)
    n_blown = _check_blown(rows)
    valid = np.array([not r["blown"] for r in rows])
    names = rows[0]["sampler"].keys()
    samples = {k: np.stack([r["sampler"][k] for r in rows]) for k in names}
    times = cfg.sample_interval * np.arange(samples["mean"].shape[1])
    post = times >= cfg.burn_in - 1e-9
    edges = {k: _edges(k, cfg.bins, cfg.hist_max) for k in names}
    counts = {k: _histogram(samples[k][valid][:, post], edges[k]) for k in names}
    hist = None
    if kinetic is not None:
        hist = merge_all([r["kinetic"] for r, ok in zip(rows, valid) if ok])
    return EmpiricalMeasure(times, cfg.burn_in, samples, valid, edges, counts, cfg.r_exponent, hist, n_blown)


def moment_report(measure: EmpiricalMeasure, r: float):
    """Time-and-path average of ``||u||_{L^r}^r`` with its standard error.

    Uses the ``Lr`` samples when ``r`` equals the sampled exponent, the ``L1``
    or ``L2`` samples for ``r = 1`` or ``2``.
    """
    if not r >= 1:
        raise ArgumentError("r must be >= 1")
    if "Lr" in measure.samples and math.isclose(r, measure.r_exponent):
        v = measure.values("Lr") ** r
    elif r == 1 and "L1" in measure.samples:
        v = measure.values("L1")
    elif r == 2 and "L2" in measure.samples:
        v = measure.values("L2") ** 2
    else:
        raise ArgumentError(f"no samples for r={r}; sample 'Lr' with r_exponent={r}")
    pm = v.mean(axis=1)
    return float(v.mean()), float(pm.std(ddof=1) / math.sqrt(len(pm)))


def krylov_bogoliubov_check(long_run: EmpiricalMeasure, ensemble: EmpiricalMeasure, name: str,
                            n_batches: int = 10):
    """Compare a single-path time average with a path average at the last time.

    The time average's standard error comes from ``n_batches`` batch means.
    Returns ``(mean_time, se_time, mean_paths, se_paths, passed)`` where
    passing means agreement within three combined standard errors.
    """
    v = long_run.values(name)[0]
    batches = np.array_split(v, n_batches)
    bm = np.array([b.mean() for b in batches])
    m1, s1 = float(v.mean()), float(bm.std(ddof=1) / math.sqrt(n_batches))
    m2, s2, _ = ensemble.path_average(name, -1)
    return m1, s1, m2, s2, abs(m1 - m2) <= 3 * math.hypot(s1, s2)


# --- coupling and hitting times ------------------------------------------

@dataclass
class CouplingRecord:
    times: np.ndarray
    diffs: np.ndarray          # (paths, times) of ||u^1 - u^2||_1
    fraction_coupled: float
    median_halving_time: float
    out_of_theorem: bool
    tol: float = 0.05

    def monotone(self, atol: float = 1e-12) -> np.ndarray:
        """Per path: differences never increase by more than ``atol``."""
        return np.all(np.diff(self.diffs, axis=1) <= atol, axis=1)


def _pair_rows(u0a, u0b, P):
    return np.stack([u0a, u0b] * P)


def coupling_experiment(u0a, u0b, cfg: EnsembleConfig, solver: SolverConfig, noise: NoiseModel | None,
                        grid: TorusGrid, flux: FluxModel, tol: float = 0.05) -> CouplingRecord:
    """Synchronized pairs (shared dt and noise) from ``u0a`` and ``u0b``, one per path."""
    gc = classify_growth(flux) if flux.degree > 2 else None
    out_of_theorem = gc is not None and not gc.kind == "sub-quadratic"
    rows = _run_paths(grid, flux, solver, noise, _pair_rows(np.asarray(u0a, float), np.asarray(u0b, float),
                      cfg.paths), 2, cfg.horizon, {"pair": {"interval": cfg.sample_interval}}, cfg.workers)
    _check_blown(rows)
    diffs = np.stack([r["pair"]["diff"] for r in rows if not r["blown"]])
    times = cfg.sample_interval * np.arange(diffs.shape[1])
    d0 = diffs[:, :1]
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(d0 > 0, diffs / d0, 0.0)
    frac = float(np.mean(rel[:, -1] < tol))
    half = []
    for rr in rel:
        k = np.flatnonzero(rr <= 0.5)
        half.append(times[k[0]] if k.size else math.inf)
    return CouplingRecord(times, diffs, frac, float(np.median(half)), out_of_theorem, tol)


@dataclass
class HittingRecord:
    kappa: float
    times: np.ndarray          # first entrance time per path; inf when censored
    horizon: float

    @property
    def censored(self) -> np.ndarray:
        return ~np.isfinite(self.times)

    def censoring_fraction(self, horizon: float | None = None) -> float:
        """Fraction of paths that have not entered the ball by ``horizon``."""
        h = self.horizon if horizon is None else horizon
        return float(np.mean(~(self.times <= h)))

    def survival(self):
        """Kaplan-Meier estimate ``(t, S(t))``; censoring only at the horizon."""
        t = np.sort(self.times[np.isfinite(self.times)])
        n = len(self.times)
        at_risk = n - np.arange(len(t))
        s = np.cumprod(1 - 1 / at_risk) if len(t) else np.array([])
        return t, s


def hitting_times(u0a, u0b, kappa: float, cfg: EnsembleConfig, solver: SolverConfig,
                  noise: NoiseModel | None, grid: TorusGrid, flux: FluxModel) -> HittingRecord:
    """First time ``||u^1||_1 + ||u^2||_1 <= 2 kappa`` for each synchronized pair."""
    if not kappa >= 0:
        raise ArgumentError("kappa must be >= 0")
    rows = _run_paths(grid, flux, solver, noise, _pair_rows(np.asarray(u0a, float), np.asarray(u0b, float),
                      cfg.paths), 2, cfg.horizon,
                      {"pair": {"interval": cfg.sample_interval, "kappa": kappa}},
                      cfg.workers)
    _check_blown(rows)
    return HittingRecord(kappa, np.array([r["pair"]["hit"] for r in rows]), cfg.horizon)


# --- small noise ---------------------------------------------------------

@dataclass
class SmallNoiseReport:
    threshold: float
    noise_sup: np.ndarray      # per path sup_t ||W||_{W^{1,inf}}
    time_avg_l1: np.ndarray    # per path (1/T) int ||u||_1
    conditional_mean: float
    unconditional_mean: float
    n_qualifying: int
    advisory: str = ""


def small_noise_experiment(cfg: EnsembleConfig, solver: SolverConfig, noise: NoiseModel | None,
                           grid: TorusGrid, flux: FluxModel, u0_generator, threshold: float | None = None,
                           quantile: float = 0.1) -> SmallNoiseReport:
    """Condition the time-averaged ``||u||_1`` on paths whose forcing stayed small.

    ``threshold`` defaults to the ``quantile`` of the realized noise sups.
    """
    u0 = np.stack([np.asarray(u0_generator(i, grid), dtype=float) for i in range(cfg.paths)])
    probes = {"sampler": {"names": ("L1",), "r": cfg.r_exponent, "interval": cfg.sample_interval}}
    if noise is not None and noise.K:
        probes["noise_sup"] = {}
    rows = _run_paths(grid, flux, solver, noise, u0, 1, cfg.horizon, probes, cfg.workers)
    _check_blown(rows)
    rows = [r for r in rows if not r["blown"]]
    sups = np.array([r["noise_sup"]["sup"] if "noise_sup" in r else 0.0 for r in rows])
    l1 = np.stack([r["sampler"]["L1"] for r in rows])
    avg = np.trapezoid(l1, dx=cfg.sample_interval, axis=1) / (cfg.sample_interval * (l1.shape[1] - 1))
    thr = float(np.quantile(sups, quantile)) if threshold is None else float(threshold)
    sel = sups <= thr
    adv = ""
    if not sel.any():
        adv = "no path stayed below the threshold; widen it"
        warnings.warn(adv, RuntimeWarning, stacklevel=2)
    cond = float(avg[sel].mean()) if sel.any() else math.nan
    return SmallNoiseReport(thr, sups, avg, cond, float(avg.mean()), int(sel.sum()), adv)
