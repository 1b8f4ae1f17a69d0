"""Fast invariant suite run by ``stoscl verify``.

Each check returns a :class:`CheckResult`; all of them finish in seconds on
small grids so the suite can gate any configuration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .config import RunConfig, parse_config, render_config
from .flux import FluxModel, iota
from .kinetic import KineticHistogram, accumulate, chi
from .noise import IncrementStream, _combine
from .solver import SolverConfig, State, TorusGrid, integrate
from .spectral import SpectralField, index_arithmetic, kernel_K, support_exponent

__all__ = ["CheckResult", "CHECKS", "run_checks"]


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def _small(cfg: RunConfig):
    """Grid, flux, noise and solver settings capped for speed."""
    grid = TorusGrid(cfg.grid.N, min(cfg.grid.M, 64 if cfg.grid.N == 1 else 24))
    flux = cfg.build_flux()
    noise = replace(cfg, grid=replace(cfg.grid, M=grid.M)).build_noise()
    solver = replace(cfg.solver_config(), t_end=min(cfg.solver.t_end, 0.5), eta=None)
    return grid, flux, noise, solver


def _random_states(grid, n, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return scale * rng.standard_normal((n,) + grid.shape)


def check_conservation(cfg):
    grid, flux, noise, solver = _small(cfg)
    u0 = _random_states(grid, 1, 1)
    path = noise.path(0) if noise.K else None
    u, _ = integrate(u0, grid, flux, solver, None if path is None else [path])
    drift = abs(float(u.mean() - u0.mean()))
    return CheckResult("conservation", drift <= 1e-12, f"mean drift {drift:.2e}")


class _PairDiff:
    def __init__(self):
        self.d = []

    def on_step(self, ev):
        self.d.append(np.mean(np.abs(ev.u_post[0::2] - ev.u_post[1::2]), axis=tuple(range(1, ev.u_post.ndim))))


def check_l1_contraction(cfg):
    grid, flux, noise, solver = _small(cfg)
    u = _random_states(grid, 2, 2)
    path = [noise.path(0)] if noise.K else None
    obs = _PairDiff()
    integrate(u, grid, flux, solver, path, replicas=2, observers=[obs])
    d = np.concatenate([[np.mean(np.abs(u[0] - u[1]))], np.ravel(obs.d)])
    worst = float(np.max(np.diff(d)))
    return CheckResult("l1_contraction", worst <= 1e-12, f"largest increase {worst:.2e}")


def check_comparison(cfg):
    grid, flux, noise, solver = _small(cfg)
    a = _random_states(grid, 1, 3)[0]
    b = a + np.abs(_random_states(grid, 1, 4)[0])
    path = [noise.path(0)] if noise.K else None
    u, _ = integrate(np.stack([a, b]), grid, flux, solver, path, replicas=2)
    worst = float(np.max(u[0] - u[1]))
    return CheckResult("comparison", worst <= 1e-12, f"max(u_a - u_b) {worst:.2e}")


def check_increment_batches(cfg):
    grid, _, noise, _ = _small(cfg)
    if not noise.K:
        return CheckResult("increment_batches", True, "no forcing")
    basis = noise.basis(grid)
    dts = np.array([1e-3, 2e-3])
    single = [_combine(IncrementStream(noise.path(i)).at(5)[None], dts[i:i + 1], basis)[0] for i in range(2)]
    z = np.stack([IncrementStream(noise.path(i)).at(5) for i in range(2)])
    batch = _combine(z, dts, basis)
    err = float(np.max(np.abs(batch - np.stack(single))))
    mean = float(np.max(np.abs(batch.reshape(2, -1).mean(axis=1))))
    return CheckResult("increment_batches", err == 0 and mean <= 1e-14,
                       f"batch mismatch {err:.1e}, increment mean {mean:.1e}")


def check_chi(cfg):
    rng = np.random.default_rng(5)
    u, xi = rng.standard_normal(200), rng.standard_normal(200)
    anti = float(np.max(np.abs(chi(u, xi) + chi(-u, -xi))))
    grid = np.linspace(-4, 4, 8001)
    h = grid[1] - grid[0]
    integral = np.array([chi(v, grid).sum() * h for v in u[:20]])
    err = float(np.max(np.abs(integral - u[:20])))
    return CheckResult("chi", bool(anti == 0 and err <= 2 * h), f"antisymmetry {anti:.1e}, integral error {err:.1e}")


def check_histogram_total(cfg):
    grid = TorusGrid(1, 64)
    hist = KineticHistogram(xi_max=1.0, nbins=16, window=0.1)
    rng = np.random.default_rng(6)
    for k in range(25):
        u = 2 * rng.standard_normal(grid.shape)
        hist = accumulate(hist, State(grid, u, 0.01 * k), 0.01, 0.01)
    err = abs(hist.total - hist.total_m) / hist.total_m
    return CheckResult("histogram_total", err <= 1e-12, f"relative bookkeeping error {err:.1e}")


def check_kernel(cfg):
    params = cfg.semigroup()
    if params.gamma == 0:
        params = replace(params, gamma=1.0)
    grid = TorusGrid(1, 128)
    k1, k2, k3 = (kernel_K(params, t, grid).coeffs for t in (0.01, 0.02, 0.03))
    mass = abs(kernel_K(params, 0.01, grid).to_real().mean() - 1)
    semi = float(np.max(np.abs(k1 * k2 - k3)))
    return CheckResult("kernel", mass <= 1e-10 and semi <= 1e-12, f"mass error {mass:.1e}, semigroup {semi:.1e}")


def check_parseval(cfg):
    grid = TorusGrid(1, 64)
    u = _random_states(grid, 1, 7)[0]
    f = SpectralField.from_real(grid, u)
    pars = abs(f.l2() - f.l2_space()) / f.l2_space()
    herm = f.hermitian_defect()
    back = float(np.max(np.abs(f.to_real() - u)))
    return CheckResult("parseval", pars <= 1e-12 and herm <= 1e-12 and back <= 1e-12,
                       f"Parseval {pars:.1e}, Hermitian defect {herm:.1e}, round trip {back:.1e}")


def check_indices(cfg):
    ok = True
    for b in (0.25, 0.5, 1.0):
        s = support_exponent(b, 1)
        idx = index_arithmetic(s["alpha"], b, 1, s["q"])
        ok &= math.isclose(idx.s_max, b / (2 * (b + 4)), rel_tol=1e-12)
        ok &= math.isclose(idx.r_bound, 2 + b / 2, rel_tol=1e-12)
    ok &= support_exponent(1.0, 3)["r_bound"] == 1.5
    return CheckResult("indices", bool(ok), "closed forms reproduced" if ok else "closed form mismatch")


def check_burgers_iota(cfg):
    flux = FluxModel([0.0, 0.0, 0.5], 10.0)
    h = 20.0 / 4001
    errs = [abs(iota(flux, e, n_xi=4001, n_beta=8) - 2 * e) for e in (1e-2, 1e-1)]
    worst = max(errs)
    return CheckResult("burgers_iota", worst <= h * (1 + 1e-9), f"max |iota - 2 eps| {worst:.1e} (cell {h:.1e})")


def check_config_round_trip(cfg):
    again = parse_config(render_config(cfg))
    return CheckResult("config_round_trip", again == cfg, "parse(render(c)) == c")


def check_deterministic_decay(cfg):
    grid, flux, _, _ = _small(cfg)
    u0 = grid.sample(lambda *x: np.sin(2 * np.pi * x[0]))
    obs = _L1()
    integrate(u0[None], grid, flux, SolverConfig(t_end=0.5), None, observers=[obs])
    worst = float(np.max(np.diff(np.concatenate([[np.mean(np.abs(u0))], obs.l1]))))
    return CheckResult("deterministic_decay", worst <= 1e-12, f"largest L1 increase {worst:.2e}")


class _L1:
    def __init__(self):
        self.l1 = []

    def on_step(self, ev):
        self.l1.append(float(np.mean(np.abs(ev.u_post[0]))))


CHECKS = (
    check_conservation,
    check_l1_contraction,
    check_comparison,
    check_increment_batches,
    check_chi,
    check_histogram_total,
    check_kernel,
    check_parseval,
    check_indices,
    check_burgers_iota,
    check_config_round_trip,
    check_deterministic_decay,
)


def run_checks(cfg: RunConfig | None = None):
    """Run every check; an exception counts as a failure."""
    cfg = cfg or RunConfig(flux=parse_config('[flux]\npreset = "burgers"\n').flux)
    out = []
    for fn in CHECKS:
        name = fn.__name__.removeprefix("check_")
        try:
            out.append(fn(cfg))
        except Exception as exc:  # noqa: BLE001
            out.append(CheckResult(name, False, f"{type(exc).__name__}: {exc}"))
    return out
