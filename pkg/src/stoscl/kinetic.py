"""Kinetic bookkeeping: chi functions and the dissipation measure.

For the viscous approximation the kinetic measure is
``m = eta |grad u|^2 delta(u = xi)``. A :class:`KineticHistogram` bins its
mass over (time window, xi) together with the Ito part
``0.5 G^2 delta(u = xi)``; the signed measure ``q = m - 0.5 G^2 delta`` is
kept as this pair of non-negative histograms.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, InsufficientDataError

__all__ = [
    "chi",
    "grad_sq",
    "KineticHistogram",
    "KineticRecorder",
    "merge_all",
    "accumulate",
    "tail_mass",
    "dissipation_balance",
    "BalanceReport",
    "hat",
    "ThetaProbe",
]


def chi(u, xi):
    """``1[u > xi > 0] - 1[0 > xi > u]``."""
    u = np.asarray(u, dtype=float)
    xi = np.asarray(xi, dtype=float)
    return ((u > xi) & (xi > 0)).astype(float) - ((0 > xi) & (xi > u)).astype(float)


def grad_sq(u, dx, N):
    """``|grad u|^2`` per cell from forward differences over the last ``N`` axes.

    Forward differences are the ones produced by summation by parts of the
    three-point Laplacian, so ``eta * sum grad_sq * dx**N`` is exactly the
    energy removed by the viscous term (to first order in dt).
    """
    out = np.zeros_like(u)
    for d in range(N):
        axis = u.ndim - N + d
        out += ((np.roll(u, -1, axis=axis) - u) / dx) ** 2
    return out


@dataclass
class KineticHistogram:
    """Mass of ``m`` and of ``0.5 G^2 delta`` per (time window, xi bin).

    Column 0 and column ``nbins + 1`` are the overflow bins below ``-xi_max``
    and above ``xi_max``.
    """

    xi_max: float = 4.0
    nbins: int = 128
    window: float = 1.0
    adaptive: bool = True
    mass_m: np.ndarray = field(default=None)
    mass_g: np.ndarray = field(default=None)
    duration: np.ndarray = field(default=None)
    total_m: float = 0.0  # independent scalar bookkeeping of m

    def __post_init__(self):
        if self.nbins < 2 or self.nbins % 2:
            raise ArgumentError("nbins must be a positive even number")
        if not self.xi_max > 0 or not self.window > 0:
            raise ArgumentError("xi_max and window must be positive")
        if self.mass_m is None:
            self.mass_m = np.zeros((0, self.nbins + 2))
            self.mass_g = np.zeros((0, self.nbins + 2))
            self.duration = np.zeros(0)

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(-self.xi_max, self.xi_max, self.nbins + 1)

    @property
    def centers(self) -> np.ndarray:
        e = self.edges
        return 0.5 * (e[1:] + e[:-1])

    @property
    def total(self) -> float:
        return float(self.mass_m.sum())

    def window_starts(self) -> np.ndarray:
        return self.window * np.arange(self.duration.size)

    def _ensure_windows(self, n):
        if n > self.duration.size:
            extra = n - self.duration.size
            self.mass_m = np.vstack([self.mass_m, np.zeros((extra, self.nbins + 2))])
            self.mass_g = np.vstack([self.mass_g, np.zeros((extra, self.nbins + 2))])
            self.duration = np.concatenate([self.duration, np.zeros(extra)])

    def bin_index(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        h = 2 * self.xi_max / self.nbins
        j = np.floor((u + self.xi_max) / h).astype(np.int64) + 1
        j = np.where(u == self.xi_max, self.nbins, j)
        return np.clip(j, 0, self.nbins + 1)

    def grown_range(self, umax: float) -> float:
        """Smallest ``xi_max * 2**k`` covering ``1.5 * umax``.

        Doubling keeps old edges on new edges when ``nbins`` is even, so
        rebinning is exact and merges stay associative.
        """
        need = 1.5 * umax
        if need <= self.xi_max:
            return self.xi_max
        return self.xi_max * 2.0 ** math.ceil(math.log2(need / self.xi_max))

    def rebin(self, new_xi_max: float):
        """Widen the xi range; old bin masses move to the bin holding their centre.

        Exact (bins nest) when the ranges differ by a power of two and
        ``nbins`` is even.
        """
        if new_xi_max <= self.xi_max:
            return
        T = _rebin_matrix(self.xi_max, new_xi_max, self.nbins)
        self.xi_max = float(new_xi_max)
        self.mass_m = self.mass_m @ T
        self.mass_g = self.mass_g @ T

    def merge(self, other: "KineticHistogram") -> "KineticHistogram":
        """Sum of two histograms on the same window length (associative)."""
        if other.window != self.window or other.nbins != self.nbins:
            raise ArgumentError("histograms need equal window length and bin count")
        a, b = self.copy(), other.copy()
        xm = max(a.xi_max, b.xi_max)
        a.rebin(xm)
        b.rebin(xm)
        n = max(a.duration.size, b.duration.size)
        a._ensure_windows(n)
        b._ensure_windows(n)
        a.mass_m = a.mass_m + b.mass_m
        a.mass_g = a.mass_g + b.mass_g
        a.duration = a.duration + b.duration
        a.total_m += b.total_m
        return a

    def copy(self) -> "KineticHistogram":
        return KineticHistogram(self.xi_max, self.nbins, self.window, self.adaptive,
                                self.mass_m.copy(), self.mass_g.copy(), self.duration.copy(), self.total_m)

    def to_csv(self, path):
        """Rows ``window_start, xi_lo, xi_hi, mass_m, mass_g``; overflow bins use +-inf."""
        e = self.edges
        lo = np.concatenate([[-math.inf], e])
        hi = np.concatenate([e, [math.inf]])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["window_start", "xi_lo", "xi_hi", "mass", "mass_g"])
            for k, t0 in enumerate(self.window_starts()):
                for j in range(self.nbins + 2):
                    w.writerow([repr(float(t0)), repr(float(lo[j])), repr(float(hi[j])),
                                repr(float(self.mass_m[k, j])), repr(float(self.mass_g[k, j]))])


def _rebin_matrix(old_xi_max, new_xi_max, nbins):
    """0/1 matrix sending each old bin (overflow bins included) to its new bin."""
    old = KineticHistogram(old_xi_max, nbins)
    new = KineticHistogram(new_xi_max, nbins)
    target = np.concatenate([[0], new.bin_index(old.centers), [nbins + 1]])
    T = np.zeros((nbins + 2, nbins + 2))
    T[np.arange(nbins + 2), target] = 1.0
    return T


def accumulate(hist: KineticHistogram, state, eta: float, dt: float, G2=None) -> KineticHistogram:
    """Add one step of ``m`` (and of ``0.5 G^2 delta`` if ``G2`` is given).

    Each cell contributes ``eta |grad u|^2 dx^N dt`` to the bin holding its
    value and ``0.5 G2 dx^N dt`` to the same bin of the Ito part.
    """
    u = state.values
    grid = state.grid
    if not np.all(np.isfinite(u)):
        raise ArgumentError("state must be finite")
    vol = grid.dx**grid.N
    umax = float(np.max(np.abs(u)))
    if hist.adaptive and umax > hist.xi_max:
        hist.rebin(hist.grown_range(umax))
    w = int(math.floor(state.time / hist.window + 1e-12))
    hist._ensure_windows(w + 1)
    idx = hist.bin_index(u).ravel()
    wm = (eta * grad_sq(u, grid.dx, grid.N) * vol * dt).ravel()
    hist.mass_m[w] += np.bincount(idx, wm, minlength=hist.nbins + 2)
    hist.total_m += eta * float(np.sum(grad_sq(u, grid.dx, grid.N))) * vol * dt
    if G2 is not None:
        wg = (0.5 * np.broadcast_to(G2, u.shape) * vol * dt).ravel()
        hist.mass_g[w] += np.bincount(idx, wg, minlength=hist.nbins + 2)
    hist.duration[w] += dt
    return hist


class KineticRecorder:
    """Solver observer keeping one histogram per path of a batch.

    Uses the pre-step state of replica 0 of every path, matching the
    explicit scheme in which the viscous term acts on ``u^n``. All paths
    share one xi range so their histograms can be merged directly.
    """

    def __init__(self, grid, eta, n_paths, G2=None, replicas=1, xi_max=4.0, nbins=128,
                 window=1.0, adaptive=True, t0=0.0):
        self.grid, self.eta, self.R, self.P = grid, eta, replicas, n_paths
        self.proto = KineticHistogram(xi_max, nbins, window, adaptive)
        nb = nbins + 2
        self.mass_m = np.zeros((n_paths, 0, nb))
        self.mass_g = np.zeros((n_paths, 0, nb))
        self.duration = np.zeros((n_paths, 0))
        self.total_m = np.zeros(n_paths)
        self.G2 = None if G2 is None else np.asarray(G2, dtype=float)
        self.t0 = t0

    def _grow(self, n):
        have = self.duration.shape[1]
        if n > have:
            extra = max(n - have, 16)
            nb = self.proto.nbins + 2
            self.mass_m = np.concatenate([self.mass_m, np.zeros((self.P, extra, nb))], axis=1)
            self.mass_g = np.concatenate([self.mass_g, np.zeros((self.P, extra, nb))], axis=1)
            self.duration = np.concatenate([self.duration, np.zeros((self.P, extra))], axis=1)

    def _rebin(self, new_xi_max):
        T = _rebin_matrix(self.proto.xi_max, new_xi_max, self.proto.nbins)
        self.mass_m = self.mass_m @ T
        self.mass_g = self.mass_g @ T
        self.proto.xi_max = float(new_xi_max)

    def on_step(self, ev):
        g, proto = self.grid, self.proto
        live = ev.dt > 0
        if not live.any():
            return
        u = ev.u_pre[:: self.R]
        umax = float(np.max(np.abs(u[live])))
        if proto.adaptive and umax > proto.xi_max:
            self._rebin(proto.grown_range(umax))
        vol = g.dx**g.N
        nb = proto.nbins + 2
        win = np.floor((self.t0 + ev.t) / proto.window + 1e-12).astype(np.int64)
        self._grow(int(win.max()) + 1)
        dt = np.where(live, ev.dt, 0.0)
        cell_dt = dt.reshape((-1,) + (1,) * g.N)
        gs = grad_sq(u, g.dx, g.N)
        wm = self.eta * gs * vol * cell_dt
        rows = np.arange(self.P).reshape((-1,) + (1,) * g.N)
        flat = ((rows * self.duration.shape[1] + win.reshape(rows.shape)) * nb + proto.bin_index(u)).ravel()
        size = self.mass_m.size
        self.mass_m += np.bincount(flat, wm.ravel(), minlength=size).reshape(self.mass_m.shape)
        axes = tuple(range(1, u.ndim))
        self.total_m += self.eta * np.sum(gs, axis=axes) * vol * dt
        if self.G2 is not None:
            wg = 0.5 * np.broadcast_to(self.G2, u.shape) * vol * cell_dt
            self.mass_g += np.bincount(flat, wg.ravel(), minlength=size).reshape(self.mass_g.shape)
        self.duration[np.arange(self.P), win] += dt

    def histogram(self, p) -> KineticHistogram:
        """Histogram of path ``p`` (windows trimmed to the recorded span)."""
        n = int(np.max(np.flatnonzero(self.duration[p] > 0), initial=-1)) + 1
        pr = self.proto
        return KineticHistogram(pr.xi_max, pr.nbins, pr.window, pr.adaptive, self.mass_m[p, :n].copy(),
                                self.mass_g[p, :n].copy(), self.duration[p, :n].copy(), float(self.total_m[p]))

    @property
    def hists(self):
        return [self.histogram(p) for p in range(self.P)]

    def merged(self) -> KineticHistogram:
        return merge_all(self.hists)


def merge_all(hists) -> KineticHistogram:
    """Sum a sequence of histograms in order."""
    hists = list(hists)
    out = hists[0].copy()
    for h in hists[1:]:
        out = out.merge(h)
    return out


def tail_mass(hist: KineticHistogram, k: float, windows=None) -> float:
    """Mass of ``m`` on ``{k <= |xi| <= k + 1}``, summed over the chosen windows.

    Mass is spread uniformly inside each bin; overflow bins count when the
    band reaches past ``xi_max``.
    """
    if k < 0:
        raise ArgumentError("k must be >= 0")
    mass = hist.mass_m if windows is None else hist.mass_m[windows]
    per_bin = mass.sum(axis=0) if mass.ndim == 2 else mass
    e = hist.edges
    lo, hi = e[:-1], e[1:]
    h = e[1] - e[0]

    def overlap(a, b):
        return np.clip(np.minimum(hi, b) - np.maximum(lo, a), 0, None) / h

    frac = overlap(k, k + 1) + overlap(-(k + 1), -k)
    total = float(np.sum(per_bin[1:-1] * frac))
    if k + 1 > hist.xi_max:
        total += float(per_bin[0] + per_bin[-1])
    return total


@dataclass
class BalanceReport:
    lhs: float
    rhs: float
    ratio: float
    degenerate: bool = False


def dissipation_balance(hist: KineticHistogram, input_rate: float, burn_in: float) -> BalanceReport:
    """Compare twice the dissipation rate after ``burn_in`` with the Ito input rate.

    ``input_rate`` is ``sum_k ||g_k||^2``. Merged histograms add both mass
    and recorded time, so for an ensemble ``lhs`` is the path average. In a
    stationary regime the energy identity forces ``ratio -> 1``. With no forcing and no dissipation the
    ratio is reported as NaN with ``degenerate=True``.
    """
    starts = hist.window_starts()
    sel = starts >= burn_in - 1e-12
    T = float(hist.duration[sel].sum())
    if T <= 0:
        raise InsufficientDataError("no recorded time after burn-in")
    lhs = 2.0 * float(hist.mass_m[sel].sum()) / T
    rhs = float(input_rate)
    if rhs == 0:
        return BalanceReport(lhs, rhs, math.nan, True)
    return BalanceReport(lhs, rhs, lhs / rhs)


def hat(k: float):
    """Continuous tent on ``[k, k + 1]`` peaking at ``k + 1/2`` with height 1."""
    def theta(xi):
        return np.clip(1.0 - 2.0 * np.abs(np.asarray(xi, dtype=float) - (k + 0.5)), 0.0, None)
    return theta


def _antiderivatives(theta, lo, hi, n=20001):
    """Grid and ``Theta(s) = int_0^s int_0^sigma theta`` on ``[lo, hi]`` (contains 0)."""
    s = np.linspace(lo, hi, n)
    i0 = int(np.argmin(np.abs(s)))
    s = s - s[i0]  # put a node exactly at zero
    th = theta(s)
    c1 = np.concatenate([[0.0], np.cumsum(0.5 * (th[1:] + th[:-1]) * np.diff(s))])
    c1 -= c1[i0]
    c2 = np.concatenate([[0.0], np.cumsum(0.5 * (c1[1:] + c1[:-1]) * np.diff(s))])
    c2 -= c2[i0]
    return s, c2


class ThetaProbe:
    """Observer accumulating the pieces of the kinetic-measure bound for one ``theta``.

    Per path it records ``int theta dm``, ``int theta d(0.5 G^2 delta)`` and
    ``||theta(u)||_{L^1(x, t)}``; ``Theta(u0)`` is taken from the first step.
    """

    def __init__(self, theta, grid, eta, G2, n_paths, replicas=1, xi_span=50.0):
        self.theta, self.grid, self.eta, self.R = theta, grid, eta, replicas
        self.G2 = np.asarray(G2, dtype=float)
        self.m = np.zeros(n_paths)
        self.g = np.zeros(n_paths)
        self.l1 = np.zeros(n_paths)
        self.Theta0 = None
        self._s, self._Theta = _antiderivatives(theta, -xi_span, xi_span)

    def Theta(self, u):
        return np.interp(u, self._s, self._Theta)

    def on_step(self, ev):
        g = self.grid
        vol = g.dx**g.N
        u = ev.u_pre[:: self.R]
        axes = tuple(range(1, u.ndim))
        if self.Theta0 is None:
            self.Theta0 = np.sum(self.Theta(u), axis=axes) * vol
        th = self.theta(u)
        dt = ev.dt
        self.m += self.eta * np.sum(th * grad_sq(u, g.dx, g.N), axis=axes) * vol * dt
        self.g += 0.5 * np.sum(th * self.G2, axis=axes) * vol * dt
        self.l1 += np.sum(th, axis=axes) * vol * dt
