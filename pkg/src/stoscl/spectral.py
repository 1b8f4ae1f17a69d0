"""Fourier-side tools: fractional heat kernels, the kinetic semigroup, the
oscillatory operator ``G``, Sobolev norms and the decomposition
``u = u0 + u_flat + u_visc + P + Q`` of a computed trajectory.

Conventions
-----------
Coefficients are ``u_hat(n) = int_T u(x) exp(-2 pi i n.x) dx``, computed with
``fft(..., norm="forward")`` so the zero mode is the spatial mean. The
semigroup acting on a kinetic function at velocity ``xi`` multiplies mode
``n`` by ``exp(-(2 pi i a(xi).n + gamma |n|**(2 alpha) + delta) t)``: the
transport part is an exact shift by ``a(xi) t`` and ``B_gamma`` has symbol
``gamma |n|**(2 alpha)``, the same one that defines the kernel ``K_t``.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ArgumentError, InsufficientDataError, IntegrityError
from .flux import FluxModel, eta as flux_eta
from .kinetic import grad_sq
from .noise import IncrementStream, NoiseModel, NoisePath, _combine
from .solver import SolverConfig, State, TorusGrid, integrate

__all__ = [
    "SemigroupParams",
    "SpectralField",
    "SpectralSeries",
    "XiGrid",
    "History",
    "QRecord",
    "DecompositionResult",
    "wavevectors",
    "kernel_K",
    "kernel_values",
    "smoothing_bound_check",
    "apply_S",
    "oscillatory_G",
    "decay_bound_check",
    "record_history",
    "q_record",
    "compute_u0",
    "compute_uflat",
    "compute_visc",
    "compute_P",
    "compute_Q",
    "decompose",
    "reconstruct",
    "sobolev_norm",
    "index_arithmetic",
    "support_exponent",
]

_TWO_PI = 2 * np.pi
_TRUNC = 1e-16


@dataclass(frozen=True)
class SemigroupParams:
    """``gamma |n|**(2 alpha) + delta`` damping; ``gamma = 0`` leaves pure transport."""

    gamma: float = 1.0
    delta: float = 1.0
    alpha: float = 0.5

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ArgumentError("gamma must be >= 0")
        if not self.delta >= 0:
            raise ArgumentError("delta must be >= 0")
        if not 0 < self.alpha <= 1:
            raise ArgumentError("alpha must lie in (0, 1]")

    def symbol(self, nabs):
        """``gamma |n|**(2 alpha)``."""
        return self.gamma * np.asarray(nabs, dtype=float) ** (2 * self.alpha)

    def omega(self, nabs):
        """``gamma |n|**(2 alpha - 1) + delta / |n|`` for ``|n| >= 1``."""
        nabs = np.asarray(nabs, dtype=float)
        return self.gamma * nabs ** (2 * self.alpha - 1) + self.delta / nabs


def wavevectors(grid: TorusGrid) -> np.ndarray:
    """Integer wavevectors in FFT order, shape ``(N, *grid.shape)``."""
    k = np.rint(np.fft.fftfreq(grid.M) * grid.M).astype(int)
    return np.stack(np.meshgrid(*([k] * grid.N), indexing="ij"))


def _nabs(grid):
    return np.sqrt(np.sum(wavevectors(grid).astype(float) ** 2, axis=0))


def _lap_symbol(grid):
    """Symbol of the three-point Laplacian, ``-(4/dx^2) sum_d sin^2(pi n_d dx)``."""
    n = wavevectors(grid)
    return -(4 / grid.dx**2) * np.sum(np.sin(np.pi * n * grid.dx) ** 2, axis=0)


def _axes(grid, lead=0):
    return tuple(range(lead, lead + grid.N))


def _fft(values, grid, lead=0):
    return np.fft.fftn(values, axes=_axes(grid, lead), norm="forward")


def _ifft(coeffs, grid, lead=0):
    return np.fft.ifftn(coeffs, axes=_axes(grid, lead), norm="forward").real


@dataclass
class SpectralField:
    """Fourier coefficients of a real field on ``grid`` (FFT order)."""

    grid: TorusGrid
    coeffs: np.ndarray

    @classmethod
    def from_real(cls, grid: TorusGrid, values) -> "SpectralField":
        values = np.asarray(values, dtype=float)
        if values.shape != grid.shape:
            raise ArgumentError("field shape does not match grid")
        return cls(grid, _fft(values, grid))

    def to_real(self) -> np.ndarray:
        return _ifft(self.coeffs, self.grid)

    @property
    def mean(self) -> complex:
        return complex(self.coeffs.flat[0])

    def l2(self) -> float:
        """``L^2(T^N)`` norm from the coefficients (Parseval)."""
        return float(np.sqrt(np.sum(np.abs(self.coeffs) ** 2)))

    def l2_space(self) -> float:
        return float(np.sqrt(np.mean(self.to_real() ** 2)))

    def hermitian_defect(self) -> float:
        """``max |c(n) - conj c(-n)|``; zero for a real field."""
        c = self.coeffs
        flipped = np.conj(np.roll(np.flip(c, axis=_axes(self.grid)), 1, axis=_axes(self.grid)))
        return float(np.max(np.abs(c - flipped)))


@dataclass
class SpectralSeries:
    """Coefficients at several times, shape ``(T, *grid.shape)``."""

    grid: TorusGrid
    times: np.ndarray
    coeffs: np.ndarray

    def __len__(self):
        return len(self.times)

    def field(self, i) -> SpectralField:
        return SpectralField(self.grid, self.coeffs[i])

    def real(self) -> np.ndarray:
        return _ifft(self.coeffs, self.grid, lead=1)


# --- kernels -------------------------------------------------------------

def _require_kernel_params(params, t):
    if not t > 0:
        raise ArgumentError("t must be positive")
    if params.gamma <= 0:
        raise ArgumentError("the kernel needs gamma > 0")


def _n_cut(params, t):
    """Smallest |n| beyond which ``exp(-gamma t |n|^(2 alpha))`` is below the cut."""
    return (math.log(1 / _TRUNC) / (params.gamma * t)) ** (1 / (2 * params.alpha))


def kernel_K(params: SemigroupParams, t: float, grid: TorusGrid) -> SpectralField:
    """``K_t`` restricted to the grid's modes, terms below 1e-16 dropped.

    The zero coefficient is exactly 1, so the kernel has unit mass.
    """
    _require_kernel_params(params, t)
    c = np.exp(-t * params.symbol(_nabs(grid)))
    c[c < _TRUNC] = 0.0
    return SpectralField(grid, c.astype(complex))


def kernel_values(params: SemigroupParams, t: float, x, N: int = 1) -> np.ndarray:
    """Full lattice sum ``sum_n exp(-gamma t |n|^(2 alpha)) exp(2 pi i n.x)``.

    ``x`` has shape ``(...)`` for ``N = 1`` and ``(2, ...)`` for ``N = 2``.
    """
    _require_kernel_params(params, t)
    x = np.asarray(x, dtype=float)
    nmax = int(math.ceil(_n_cut(params, t)))
    if N == 1:
        n = np.arange(1, nmax + 1)
        w = np.exp(-t * params.symbol(n))
        out = np.ones(x.shape)
        for nk, wk in zip(n, w):
            out += 2 * wk * np.cos(_TWO_PI * nk * x)
        return out
    if N != 2:
        raise ArgumentError("N must be 1 or 2")
    out = np.zeros(x.shape[1:])
    r = np.arange(-nmax, nmax + 1)
    for n1 in r:
        w = np.exp(-t * params.symbol(np.sqrt(n1 * n1 + r * r)))
        keep = w >= _TRUNC
        for n2, wk in zip(r[keep], w[keep]):
            out += wk * np.cos(_TWO_PI * (n1 * x[0] + n2 * x[1]))
    return out


@dataclass
class SmoothingReport:
    t: np.ndarray
    norms: np.ndarray
    random_estimates: np.ndarray
    exponent: float
    predicted: float
    passed: bool


_PAIRS = {(1, 1), (1, 2), (1, math.inf), (2, 2), (2, math.inf), (math.inf, math.inf)}


def _kernel_norm(k_real, p):
    if p == math.inf:
        return float(np.max(np.abs(k_real)))
    return float(np.mean(np.abs(k_real) ** p) ** (1 / p))


def smoothing_bound_check(params: SemigroupParams, m, n, beta: int, N: int = 1,
                          t_values=None, n_random: int = 8, seed: int = 0) -> SmoothingReport:
    """Fit the short-time exponent of ``||(-Lap)^(beta/2) exp(-t B)||_{L^m -> L^n}``.

    The operator is a convolution, so its norms are known exactly:
    ``||k||_n`` from ``L^1``, ``||k||_{m'}`` into ``L^infinity``, the sup of
    the multiplier on ``L^2``. Random band-limited inputs give a lower
    estimate recorded alongside. The check passes when the fitted exponent
    is at least ``-(N/(2 alpha))(1/m - 1/n) - beta/(2 alpha) - 0.1``.
    """
    m = math.inf if m in ("inf", math.inf) else m
    n = math.inf if n in ("inf", math.inf) else n
    if (m, n) not in _PAIRS:
        raise ArgumentError(f"unsupported norm pair ({m}, {n})")
    if beta not in (0, 1):
        raise ArgumentError("beta must be 0 or 1")
    if params.gamma <= 0:
        raise ArgumentError("the smoothing check needs gamma > 0")
    a = params.alpha
    n_cap = 8192 if N == 1 else 128
    t_min = max(1e-4, math.log(1 / _TRUNC) / (params.gamma * n_cap ** (2 * a)))
    if t_values is None:
        t_values = np.geomspace(t_min, max(10 * t_min, 0.05 / params.gamma), 8)
    t_values = np.asarray(t_values, dtype=float)
    M = 2 * int(2 ** math.ceil(math.log2(min(n_cap, _n_cut(params, t_values.min())) + 1)))
    grid = TorusGrid(N, max(M, 16))
    nabs = _nabs(grid)
    mult_beta = (_TWO_PI * nabs) ** beta
    rng = np.random.default_rng(seed)
    band = nabs <= grid.M / 8
    inv = lambda p: 1.0 if p == math.inf else (math.inf if p == 1 else p / (p - 1))  # noqa: E731
    norms, rand = [], []
    for t in t_values:
        mult = mult_beta * np.exp(-t * params.symbol(nabs))
        k = _ifft(mult.astype(complex), grid)
        if (m, n) == (2, 2):
            norms.append(float(np.max(mult)))
        elif m == 1:
            norms.append(_kernel_norm(k, n))
        else:
            norms.append(_kernel_norm(k, inv(m)))
        best = 0.0
        for _ in range(n_random):
            v_hat = np.where(band, rng.normal(size=grid.shape) + 1j * rng.normal(size=grid.shape), 0)
            v = _ifft(v_hat, grid)
            v /= max(_kernel_norm(v, m), 1e-300)
            best = max(best, _kernel_norm(_ifft(mult * _fft(v, grid), grid), n))
        rand.append(best)
    norms = np.asarray(norms)
    slope = float(np.polyfit(np.log(t_values), np.log(norms), 1)[0])
    predicted = -(N / (2 * a)) * ((1 / m) - (1 / n)) - beta / (2 * a)
    return SmoothingReport(t_values, norms, np.asarray(rand), slope, predicted, slope >= predicted - 0.1)


# --- semigroup and oscillatory integrals ---------------------------------

def _rate(params, flux, xi, grid):
    """``2 pi i a(xi).n + gamma |n|^(2 alpha) + delta`` for every xi; shape ``(len(xi), *shape)``."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    nvec = wavevectors(grid).astype(float)
    a = flux.a(xi)  # (N, J)
    phase = sum(a[d].reshape((-1,) + (1,) * grid.N) * nvec[d][None] for d in range(grid.N))
    return 2j * np.pi * phase + (params.symbol(_nabs(grid)) + params.delta)[None]


def apply_S(params: SemigroupParams, fld: SpectralField, xi: float, t: float, flux: FluxModel) -> SpectralField:
    """Apply the kinetic semigroup at velocity ``xi`` for time ``t``."""
    if not t >= 0:
        raise ArgumentError("t must be >= 0")
    lam = _rate(params, flux, [xi], fld.grid)[0]
    return SpectralField(fld.grid, fld.coeffs * np.exp(-lam * t))


def _G_trapezoid(flux, vals, xi, z):
    phase = np.tensordot(np.asarray(z, dtype=float).reshape(-1), flux.a(xi).reshape(flux.dim, -1), axes=1)
    return np.trapezoid(np.exp(-1j * phase) * vals, xi)


def oscillatory_G(flux: FluxModel, phi, n, z, support=None, tol: float = 1e-8,
                  max_points: int = 2**22) -> complex:
    """``int exp(-i a(xi).z) phi(xi) dxi`` by trapezoid sums refined until stable.

    ``phi`` is a callable of ``xi``; if ``n`` is not None it is called as
    ``phi(n, xi)``. ``support`` defaults to ``[-xi_max, xi_max]``.
    """
    lo, hi = support if support is not None else (-flux.xi_max, flux.xi_max)
    prof = (lambda x: phi(x)) if n is None else (lambda x: phi(n, x))
    pts = 257
    prev = None
    while True:
        xi = np.linspace(lo, hi, pts)
        val = complex(_G_trapezoid(flux, np.asarray(prof(xi), dtype=float), xi, z))
        if prev is not None and abs(val - prev) < tol:
            return val
        if pts > max_points:
            warnings.warn("oscillatory_G did not reach the requested tolerance", RuntimeWarning, stacklevel=2)
            return val
        prev = val
        pts = 2 * pts - 1


@dataclass
class DecayReport:
    omegas: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    passed: bool
    skipped: bool = False


def decay_bound_check(flux: FluxModel, phi, direction=None, omegas=(0.5, 1.0, 2.0, 4.0),
                      support=None, n_nodes: int = 4000, tail_tol: float = 1e-3) -> DecayReport:
    """Check ``int |G(s d)|^2 / (1 + 4 w^2 s^2) ds <= 1.1 (pi / w) eta(w) ||phi||_2^2``.

    The s-integral is mapped to ``theta = arctan(2 w s)`` and cut where the
    remaining tail is provably below ``tail_tol`` times the right-hand side;
    that tail bound is added to the left-hand side.
    """
    omegas = np.asarray(omegas, dtype=float)
    if flux.is_degenerate():
        nan = np.full(omegas.shape, np.nan)
        return DecayReport(omegas, nan, nan, False, skipped=True)
    d = np.ones(flux.dim) if direction is None else np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    lo, hi = support if support is not None else (-flux.xi_max, flux.xi_max)
    a_rng = float(np.max(flux.max_speed(lo, hi, 0))) if flux.dim == 1 else float(
        max(np.max(flux.max_speed(lo, hi, k)) for k in range(flux.dim)))
    xi_probe = np.linspace(lo, hi, 20001)
    phi_probe = np.asarray(phi(xi_probe), dtype=float)
    l1 = float(np.trapezoid(np.abs(phi_probe), xi_probe))
    l2sq = float(np.trapezoid(phi_probe**2, xi_probe))
    lhs, rhs = [], []
    x_nodes, w_nodes = np.polynomial.legendre.leggauss(n_nodes)
    for w in omegas:
        r = 1.1 * (np.pi / w) * float(flux_eta(flux, w)) * l2sq
        if l1 == 0:
            lhs.append(0.0)
            rhs.append(r)
            continue
        # tail: |G| <= l1 so int_{|s|>S} <= 2 l1^2 / (4 w^2 S)
        S = 2 * l1**2 / (4 * w**2 * tail_tol * max(r, 1e-300))
        th_max = math.atan(2 * w * S)
        th = th_max * x_nodes
        s = np.tan(th) / (2 * w)
        n_xi = int(max(2001, 40 * (hi - lo) * 2 * a_rng * S / _TWO_PI))
        xi = np.linspace(lo, hi, n_xi)
        vals = np.asarray(phi(xi), dtype=float)
        G = np.array([_G_trapezoid(flux, vals, xi, sk * d) for sk in s])
        integral = th_max * float(np.sum(w_nodes * np.abs(G) ** 2)) / (2 * w)
        lhs.append(integral + 2 * l1**2 / (4 * w**2 * S))
        rhs.append(r)
    lhs, rhs = np.asarray(lhs), np.asarray(rhs)
    return DecayReport(omegas, lhs, rhs, bool(np.all(lhs <= rhs)))


# --- decomposition -------------------------------------------------------

@dataclass(frozen=True)
class XiGrid:
    """``J`` cells of width ``h`` on ``[-xi_max, xi_max]``; nodes at cell centres."""

    xi_max: float
    J: int = 256

    def __post_init__(self):
        if not self.xi_max > 0 or self.J < 2:
            raise ArgumentError("need xi_max > 0 and J >= 2")

    @property
    def h(self) -> float:
        return 2 * self.xi_max / self.J

    @property
    def nodes(self) -> np.ndarray:
        return -self.xi_max + (np.arange(self.J) + 0.5) * self.h

    def _shape(self, u):
        return (-1,) + (1,) * np.ndim(u)

    def chi_average(self, u) -> np.ndarray:
        """Cell averages of ``chi_u`` over each xi cell; shape ``(J, *u.shape)``.

        ``h * sum_j`` of the result is exactly ``u`` when ``|u| <= xi_max``.
        """
        u = np.asarray(u, dtype=float)
        lo = (self.nodes - 0.5 * self.h).reshape(self._shape(u))
        hi = lo + self.h
        pos = np.clip(np.minimum(hi, np.maximum(u, 0)) - np.maximum(lo, 0), 0, None)
        neg = np.clip(np.minimum(hi, 0) - np.maximum(lo, np.minimum(u, 0)), 0, None)
        return (pos - neg) / self.h

    def deposit(self, u, w) -> np.ndarray:
        """Spread weights ``w`` located at ``xi = u`` linearly onto the two nearest nodes."""
        u = np.asarray(u, dtype=float)
        w = np.broadcast_to(np.asarray(w, dtype=float), u.shape)
        p = np.clip((u + self.xi_max) / self.h - 0.5, 0, self.J - 1)
        j0 = np.minimum(np.floor(p).astype(int), self.J - 2)
        fr = p - j0
        size = u.size
        cell = np.arange(size).reshape(u.shape)
        flat = np.concatenate([(j0 * size + cell).ravel(), ((j0 + 1) * size + cell).ravel()])
        wts = np.concatenate([(w * (1 - fr)).ravel(), (w * fr).ravel()])
        return np.bincount(flat, wts, minlength=self.J * size).reshape((self.J,) + u.shape)


@dataclass
class History:
    """Per-step record of a trajectory: states at step boundaries and mid-states.

    ``u[k]`` is the state at ``t[k]``; step ``k`` applies the deterministic
    update (giving ``u_mid[k]``) and then the noise increment over ``dt[k]``.
    """

    grid: TorusGrid
    eta: float
    t: np.ndarray
    dt: np.ndarray
    u: np.ndarray
    u_mid: np.ndarray
    increment_hash: str = ""
    noise: NoiseModel | None = None
    path_index: int = 0

    @property
    def steps(self) -> int:
        return len(self.dt)

    @property
    def increments(self) -> np.ndarray:
        return self.u[1:] - self.u_mid


class _HistoryRecorder:
    def __init__(self):
        self.u, self.mid, self.dt = [], [], []

    def on_step(self, ev):
        if ev.dt[0] <= 0:
            return
        if not self.u:
            self.u.append(ev.u_pre[0].copy())
        self.mid.append(ev.u_mid[0].copy())
        self.u.append(ev.u_post[0].copy())
        self.dt.append(float(ev.dt[0]))


def record_history(u0: State, cfg: SolverConfig, flux: FluxModel, path: NoisePath | None = None) -> History:
    """Run the solver and keep every step (needed by the decomposition)."""
    rec = _HistoryRecorder()
    _, info = integrate(u0.values[None], u0.grid, flux, cfg, None if path is None else [path],
                        observers=[rec], hash_increments=True)
    dt = np.asarray(rec.dt)
    t = u0.time + np.concatenate([[0.0], np.cumsum(dt)])
    u = np.asarray(rec.u) if rec.u else u0.values[None].copy()
    mid = np.asarray(rec.mid) if rec.mid else np.zeros((0,) + u0.grid.shape)
    return History(u0.grid, cfg.viscosity(u0.grid), t, dt, u, mid, info["increment_hash"][0],
                   None if path is None else path.model, 0 if path is None else path.path_index)


def _phi12(z, E):
    """``phi1 = (1 - e^-z)/z`` and ``phi2 = (z - 1 + e^-z)/z^2`` given ``E = e^-z``."""
    small = np.abs(z) < 1e-3
    zs = np.where(small, 1.0, z)
    p1 = (1 - E) / zs
    p2 = (1 - p1) / zs
    if small.any():
        zz = z[small]
        p1[small] = 1 - zz / 2 + zz * zz / 6 - zz**3 / 24
        p2[small] = 0.5 - zz / 6 + zz * zz / 24 - zz**3 / 120
    return p1, p2


def _output_indices(history, times):
    if times is None:
        return np.arange(len(history.t))
    times = np.atleast_1d(np.asarray(times, dtype=float))
    idx = np.searchsorted(history.t, times - 1e-9 * max(1.0, history.t[-1]))
    idx = np.minimum(idx, len(history.t) - 1)
    if np.any(np.abs(history.t[idx] - times) > 1e-9 * max(1.0, history.t[-1])):
        raise ArgumentError("requested times must be recorded step times")
    return idx


def _default_xi(history):
    return XiGrid(1.05 * max(float(np.max(np.abs(history.u))), 1e-3))


def _check_zero_mean(u):
    if abs(float(np.mean(u))) > 1e-12 * max(1.0, float(np.max(np.abs(u)))):
        raise ArgumentError("initial state must have zero mean")


def compute_u0(params: SemigroupParams, u0: State, flux: FluxModel, times, xi: XiGrid | None = None) -> SpectralSeries:
    """``u0(t) = int S(t) chi_{u0}(xi) dxi``."""
    _check_zero_mean(u0.values)
    g = u0.grid
    xi = xi or XiGrid(1.05 * max(float(np.max(np.abs(u0.values))), 1e-3))
    f0 = _fft(xi.chi_average(u0.values), g, lead=1)
    lam = _rate(params, flux, xi.nodes, g)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    steps = np.diff(times)
    if len(times) > 2 and np.allclose(steps, steps[0], rtol=1e-12, atol=0):
        # uniform times: advance by repeated multiplication
        E = np.exp(-lam * steps[0])
        cur = np.exp(-lam * (times[0] - u0.time)) * f0
        out = [xi.h * cur.sum(axis=0)]
        for _ in steps:
            cur = cur * E
            out.append(xi.h * cur.sum(axis=0))
        out = np.array(out)
    else:
        out = np.array([xi.h * np.sum(np.exp(-lam * (t - u0.time)) * f0, axis=0) for t in times])
    return SpectralSeries(g, times, out)


def _convolve_f(params, history, flux, times, xi):
    """``int_0^t S(t - s) f(s) ds`` (summed over xi with weight h), f linear between steps."""
    if history.steps < 8:
        raise InsufficientDataError("need at least 8 recorded steps")
    g = history.grid
    xi = xi or _default_xi(history)
    lam = _rate(params, flux, xi.nodes, g)
    idx = _output_indices(history, times)
    F = np.zeros(lam.shape, dtype=complex)
    f_prev = _fft(xi.chi_average(history.u[0]), g, lead=1)
    out = {0: np.zeros(g.shape, dtype=complex)}
    want = set(idx.tolist())
    for k, dt in enumerate(history.dt):
        f_next = _fft(xi.chi_average(history.u[k + 1]), g, lead=1)
        z = lam * dt
        E = np.exp(-z)
        p1, p2 = _phi12(z, E)
        F = E * F + dt * ((p1 - p2) * f_prev + p2 * f_next)
        f_prev = f_next
        if k + 1 in want:
            out[k + 1] = xi.h * F.sum(axis=0)
    return history.t[idx], np.array([out[i] for i in idx])


def _check_cadence(params, history):
    if history.dt.size and params.gamma > 0 and float(np.max(history.dt)) > 0.01 / params.gamma:
        raise InsufficientDataError("step cadence too coarse: need dt <= 0.01 / gamma")


def _flat(params, grid, t, conv):
    mult = params.symbol(_nabs(grid)) + params.delta
    return SpectralSeries(grid, t, mult[None] * conv)


def _visc(history, t, conv):
    mult = history.eta * _lap_symbol(history.grid)
    return SpectralSeries(history.grid, t, mult[None] * conv)


def compute_uflat(params: SemigroupParams, history: History, flux: FluxModel, times=None,
                  xi: XiGrid | None = None) -> SpectralSeries:
    """``u_flat(t) = int_0^t int S(t - s)(B_gamma + delta) f(s) dxi ds``."""
    _check_cadence(params, history)
    t, conv = _convolve_f(params, history, flux, times, xi)
    return _flat(params, history.grid, t, conv)


def compute_visc(params: SemigroupParams, history: History, flux: FluxModel, times=None,
                 xi: XiGrid | None = None) -> SpectralSeries:
    """Viscous part ``int_0^t int S(t - s) eta Lap_h f(s) dxi ds`` with the discrete Laplacian."""
    t, conv = _convolve_f(params, history, flux, times, xi)
    return _visc(history, t, conv)


class _AtomConvolution:
    """Running ``Y = sum e^{-lam (t - s)} w_hat`` and ``Z = sum (t - s) e^{-lam (t - s)} w_hat``."""

    def __init__(self, lam, with_age=False):
        self.lam = lam
        self.Y = np.zeros(lam.shape, dtype=complex)
        self.Z = np.zeros(lam.shape, dtype=complex) if with_age else None
        self.t = 0.0

    def advance(self, t):
        d = t - self.t
        if d < 0:
            raise ArgumentError("atoms must arrive in time order")
        if d > 0:
            E = np.exp(-self.lam * d)
            if self.Z is not None:
                self.Z = E * (self.Z + d * self.Y)
            self.Y = E * self.Y
        self.t = t

    def add(self, w_hat):
        self.Y += w_hat


def compute_P(params: SemigroupParams, history: History, path: NoisePath, flux: FluxModel,
              times=None, xi: XiGrid | None = None) -> SpectralSeries:
    """Stochastic convolution of the replayed noise, atoms at ``xi = u_mid``.

    The increments are regenerated from ``path`` with the recorded step
    sizes; a hash mismatch with the recording raises ``IntegrityError``.
    """
    g = history.grid
    xi = xi or _default_xi(history)
    idx = _output_indices(history, times)
    basis = path.model.basis(g)
    incr = np.zeros((history.steps,) + g.shape)
    hsh = hashlib.sha256()
    if basis.shape[0]:
        stream = IncrementStream(path)
        for k, dt in enumerate(history.dt):
            incr[k] = _combine(stream.at(k)[None], np.array([dt]), basis)[0]
            hsh.update(incr[k].tobytes())
    if hsh.hexdigest() != history.increment_hash:
        raise IntegrityError("replayed increments do not match the recorded trajectory")
    acc = _AtomConvolution(_rate(params, flux, xi.nodes, g))
    acc.t = history.t[0]
    out = {0: np.zeros(g.shape, dtype=complex)}
    want = set(idx.tolist())
    for k in range(history.steps):
        acc.advance(history.t[k + 1])
        if basis.shape[0]:
            acc.add(_fft(xi.deposit(history.u_mid[k], incr[k]), g, lead=1))
        if k + 1 in want:
            out[k + 1] = acc.Y.sum(axis=0)
    return SpectralSeries(g, history.t[idx], np.array([out[i] for i in idx]))


@dataclass
class QRecord:
    """x-resolved atoms of ``q``: at time ``s[k]`` cell i carries weight ``w[k][i]`` at ``xi = u[k][i]``."""

    grid: TorusGrid
    s: np.ndarray
    u: np.ndarray
    w: np.ndarray


def q_record(history: History, G2=None) -> QRecord:
    """Atoms of ``q = m - 0.5 G^2 delta`` at each step midpoint, located at the pre-step state."""
    g = history.grid
    u = history.u[:-1]
    dt = history.dt.reshape((-1,) + (1,) * g.N)
    w = history.eta * grad_sq(u, g.dx, g.N) * dt
    if G2 is None and history.noise is not None and history.noise.K:
        G2 = history.noise.G2(g.coords)
    if G2 is not None:
        w = w - 0.5 * np.asarray(G2)[None] * dt
    return QRecord(g, history.t[:-1] + 0.5 * history.dt, u, w)


def compute_Q(params: SemigroupParams, qrec, flux: FluxModel, times, xi: XiGrid | None = None,
              t0: float = 0.0) -> SpectralSeries:
    """``Q(t) = sum_atoms 2 pi i n.a'(xi) (t - s) S_xi(t - s) w_hat``."""
    if not isinstance(qrec, QRecord) or qrec.u is None or qrec.w is None:
        raise InsufficientDataError("compute_Q needs x-resolved atoms (a QRecord)")
    g = qrec.grid
    xi = xi or XiGrid(1.05 * max(float(np.max(np.abs(qrec.u))) if qrec.u.size else 0.0, 1e-3))
    lam = _rate(params, flux, xi.nodes, g)
    nvec = wavevectors(g).astype(float)
    da = flux.da(xi.nodes)
    coup = 2j * np.pi * sum(da[d].reshape((-1,) + (1,) * g.N) * nvec[d][None] for d in range(g.N))
    times = np.atleast_1d(np.asarray(times, dtype=float))
    acc = _AtomConvolution(lam, with_age=True)
    acc.t = t0
    out = []
    k = 0
    for t in times:
        while k < len(qrec.s) and qrec.s[k] <= t:
            acc.advance(qrec.s[k])
            acc.add(_fft(xi.deposit(qrec.u[k], qrec.w[k]), g, lead=1))
            k += 1
        acc.advance(t)
        out.append(np.sum(coup * acc.Z, axis=0))
    return SpectralSeries(g, times, np.array(out))


@dataclass
class DecompositionResult:
    times: np.ndarray
    u0_part: SpectralSeries
    uflat_part: SpectralSeries
    visc_part: SpectralSeries
    P_part: SpectralSeries | None
    Q_part: SpectralSeries
    residual: np.ndarray = field(default=None)
    xi: XiGrid | None = None

    def parts(self) -> dict:
        out = {"u0": self.u0_part, "uflat": self.uflat_part, "visc": self.visc_part, "Q": self.Q_part}
        if self.P_part is not None:
            out["P"] = self.P_part
        return out

    def total(self) -> np.ndarray:
        return sum(p.real() for p in self.parts().values())


def decompose(params: SemigroupParams, history: History, flux: FluxModel, path: NoisePath | None = None,
              times=None, xi: XiGrid | None = None) -> DecompositionResult:
    """All parts of the trajectory on common record times, plus the L1 residual."""
    _check_zero_mean(history.u[0])
    xi = xi or _default_xi(history)
    idx = _output_indices(history, times)
    t = history.t[idx]
    u0 = compute_u0(params, State(history.grid, history.u[0], history.t[0]), flux, t, xi)
    _check_cadence(params, history)
    _, conv = _convolve_f(params, history, flux, t, xi)
    uf = _flat(params, history.grid, t, conv)
    uv = _visc(history, t, conv)
    P = None
    if path is not None:
        P = compute_P(params, history, path, flux, t, xi)
    elif history.increment_hash and history.noise is not None and history.noise.K:
        raise ArgumentError("a noisy history needs its NoisePath")
    Q = compute_Q(params, q_record(history), flux, t, xi, t0=history.t[0])
    res = DecompositionResult(t, u0, uf, uv, P, Q, xi=xi)
    res.residual = reconstruct(res, history.u[idx])
    return res


def reconstruct(decomp: DecompositionResult, u_snapshots) -> np.ndarray:
    """``||u - sum of parts||_1 / max(||u||_1, 1e-8)`` at each record time."""
    u = np.asarray(u_snapshots, dtype=float)
    axes = tuple(range(1, u.ndim))
    err = np.mean(np.abs(u - decomp.total()), axis=axes)
    return err / np.maximum(np.mean(np.abs(u), axis=axes), 1e-8)


# --- norms and indices ---------------------------------------------------

def sobolev_norm(fld: SpectralField, s: float) -> float:
    """``(sum_n (1 + |2 pi n|^2)^s |u_hat(n)|^2)^(1/2)``."""
    w = (1 + (_TWO_PI * _nabs(fld.grid)) ** 2) ** s
    return float(np.sqrt(np.sum(w * np.abs(fld.coeffs) ** 2)))


@dataclass
class Indices:
    ind0: float
    ind_flat: float
    ind_P: float
    ind_Q_plus: float
    mu: float | None
    s_max: float
    empty: bool
    r_bound: float


def index_arithmetic(alpha: float, b: float, N: int, q: float = 2.0, lam: float | None = None,
                     p: float | None = None) -> Indices:
    """Regularity indices of the four parts and the admissible ``W^{s,q}`` window.

    The window is ``0 < s < s_max`` with ``s_max`` the smallest of
    ``N/q + min((1/2 - alpha) b - N/2, alpha - N/2, 4 alpha - (N + 1))``,
    ``(1/2 - alpha) b`` and ``alpha``. ``r_bound`` is the Lebesgue exponent
    reached by Sobolev embedding as ``s -> s_max``. Passing
    :class:`fractions.Fraction` arguments makes every result exact.
    """
    if not 0 < alpha <= 1 or N < 1 or q < 1 or not 0 < b <= 1:
        raise ArgumentError("need 0 < alpha <= 1, 0 < b <= 1, N >= 1, q >= 1")
    # integer constants only, so Fraction inputs give exact results
    N, q = Fraction(N), (Fraction(q) if isinstance(q, (int, Fraction)) else q)
    gain = (1 - 2 * alpha) * b / 2
    ind0 = (alpha + gain) / N - Fraction(1, 2)
    ind_flat = gain / N - Fraction(1, 2)
    ind_P = alpha / N - Fraction(1, 2)
    ind_Q_plus = 4 * alpha / N - (N + 1) / N
    mu = None
    if lam is not None and p is not None:
        mu = 2 - (N + lam + 1) / (2 * alpha) + N / (2 * p * alpha)
    s_max = min(N / q + min(gain - N / 2, alpha - N / 2, 4 * alpha - (N + 1)), gain, alpha)
    empty = s_max <= 0
    denom = 1 / q - max(s_max, 0) / N
    r_bound = math.inf if denom <= 0 else 1 / denom
    return Indices(ind0, ind_flat, ind_P, ind_Q_plus, mu, s_max, empty, r_bound)


def support_exponent(b: float, N: int) -> dict:
    """Optimal parameters and the supremum of admissible ``r`` (closed form, exact for Fraction ``b``)."""
    if N == 1:
        alpha = (b + 3) / (2 * (b + 4))
        return {"alpha": alpha, "q": 2, "s_max": b / (2 * (b + 4)), "r_bound": 2 + b / 2}
    return {"alpha": Fraction(1, 2), "q": Fraction(N, N - 1), "s_max": 0, "r_bound": Fraction(N, N - 1)}
