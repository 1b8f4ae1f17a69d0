"""Polynomial flux functions and their non-degeneracy functionals.

A flux ``A: R -> R^N`` is stored as one ascending coefficient list per space
dimension. The characteristic speed is ``a = A'`` and its derivative ``a'``
controls the growth class.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import polynomial as P

from .errors import ArgumentError, NoFitError, RangeError

__all__ = [
    "FluxModel",
    "GrowthClass",
    "NondegReport",
    "DegenerateFluxWarning",
    "OutOfTheoremWarning",
    "burgers",
    "eval_A",
    "iota",
    "eta",
    "fit_b",
    "nondegeneracy_sweep",
    "classify_growth",
    "beta_directions",
]


class DegenerateFluxWarning(UserWarning):
    """The speed ``beta . a(xi)`` is constant for some direction beta."""


class OutOfTheoremWarning(UserWarning):
    """The flux grows faster than the existence theory allows."""


def _horner(x, c):
    # plain Horner; numpy.polynomial.polyval's overhead dominates small arrays
    out = np.full(np.shape(x), c[-1]) if len(c) == 1 else c[-1] * x + c[-2]
    for ci in c[-3::-1]:
        out = out * x + ci
    return out


def _trim(c):
    c = np.trim_zeros(np.asarray(c, dtype=float), "b")
    return c if c.size else np.zeros(1)


@dataclass(frozen=True)
class FluxModel:
    """Polynomial flux with one coefficient list per dimension.

    Parameters
    ----------
    coeffs : sequence of sequences of float
        ``coeffs[d][j]`` is the coefficient of ``xi**j`` in ``A_d``. A flat
        list is accepted for N=1.
    xi_max : float
        Half-width of the evaluation interval ``[-xi_max, xi_max]``.
    """

    coeffs: tuple
    xi_max: float = 10.0
    _A: tuple = field(init=False, repr=False, compare=False)
    _a: tuple = field(init=False, repr=False, compare=False)
    _da: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        c = self.coeffs
        if len(c) and np.isscalar(c[0]):
            c = (c,)
        c = tuple(tuple(float(v) for v in comp) for comp in c)
        if not c or len(c) > 2:
            raise ArgumentError("flux needs one or two coefficient lists")
        for comp in c:
            if not comp or not all(np.isfinite(comp)):
                raise ArgumentError("flux coefficients must be finite and non-empty")
        if max(len(_trim(comp)) for comp in c) < 2:
            raise ArgumentError("flux degree must be at least 1")
        if not self.xi_max > 0:
            raise ArgumentError("xi_max must be positive")
        object.__setattr__(self, "coeffs", c)
        A = tuple(_trim(comp) for comp in c)
        a = tuple(_trim(P.polyder(comp)) for comp in A)
        da = tuple(_trim(P.polyder(comp)) for comp in a)
        object.__setattr__(self, "_A", A)
        object.__setattr__(self, "_a", a)
        object.__setattr__(self, "_da", da)

    @property
    def dim(self) -> int:
        return len(self.coeffs)

    @property
    def degree(self) -> int:
        return max(len(c) - 1 for c in self._A)

    def A(self, xi, d=None):
        """Flux components; shape ``(N, *xi.shape)`` or component ``d``."""
        return self._eval(self._A, xi, d)

    def a(self, xi, d=None):
        """Characteristic speed ``A'``."""
        return self._eval(self._a, xi, d)

    def da(self, xi, d=None):
        """Derivative of the speed, ``A''``."""
        return self._eval(self._da, xi, d)

    @staticmethod
    def _eval(polys, xi, d):
        xi = np.asarray(xi, dtype=float)
        if d is not None:
            return _horner(xi, polys[d])
        return np.stack([_horner(xi, c) for c in polys])

    def max_speed(self, lo, hi, d):
        """``max |a_d(xi)|`` over ``xi`` in ``[lo, hi]`` (exact for polynomials).

        ``lo`` and ``hi`` may be arrays of the same shape.
        """
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        a = self._a[d]
        out = np.maximum(np.abs(_horner(lo, a)), np.abs(_horner(hi, a)))
        if len(a) > 2:
            crit = P.polyroots(self._da[d])
            crit = np.real(crit[np.abs(np.imag(crit)) < 1e-12])
            for r in crit:
                inside = (lo <= r) & (r <= hi)
                out = np.where(inside, np.maximum(out, abs(_horner(r, a))), out)
        return out

    def eo_split(self, d):
        """Return ``(A_plus, A_minus)`` for the Engquist-Osher flux in dimension d.

        ``A_plus(u) = A(0) + int_0^u max(a, 0)`` and
        ``A_minus(u) = int_0^u min(a, 0)``, so ``A_plus + A_minus = A``.
        """
        A, a = self._A[d], self._a[d]
        roots = P.polyroots(a) if len(a) > 1 else np.array([])
        roots = np.real(roots[np.abs(np.imag(roots)) < 1e-12]) if roots.size else roots
        bps = np.unique(np.concatenate([[0.0], roots]))
        # sign of a on each interval: (-inf, b0), (b0, b1), ..., (b_last, inf)
        probes = np.concatenate([[bps[0] - 1.0], 0.5 * (bps[1:] + bps[:-1]), [bps[-1] + 1.0]])
        positive = _horner(probes, a) > 0
        A_b = _horner(bps, A)
        # G(b) = int_0^b max(a, 0), accumulated outward from xi = 0
        zero = int(np.searchsorted(bps, 0.0))
        G = np.zeros_like(bps)
        for k in range(zero + 1, bps.size):
            G[k] = G[k - 1] + (A_b[k] - A_b[k - 1]) * positive[k]
        for k in range(zero - 1, -1, -1):
            G[k] = G[k + 1] - (A_b[k + 1] - A_b[k]) * positive[k + 1]
        A0 = A[0]

        if bps.size == 1:
            b0, G0, Ab0 = bps[0], G[0], A_b[0]
            lo, hi = bool(positive[0]), bool(positive[1])

            def A_plus(u):
                u = np.asarray(u, dtype=float)
                if lo == hi:
                    return A0 + G0 + (_horner(u, A) - Ab0) if hi else np.full(u.shape, A0 + G0)
                rest = np.maximum(u, b0) if hi else np.minimum(u, b0)
                return A0 + G0 + (_horner(rest, A) - Ab0)
        else:
            def A_plus(u):
                u = np.asarray(u, dtype=float)
                j = np.searchsorted(bps, u, side="right") - 1  # left breakpoint index
                ref = np.clip(j, 0, bps.size - 1)
                pos = positive[j + 1]
                return A0 + G[ref] + pos * (_horner(u, A) - A_b[ref])

        def A_minus(u):
            return _horner(np.asarray(u, dtype=float), A) - A_plus(u)

        return A_plus, A_minus

    def is_degenerate(self) -> bool:
        """True when some direction beta makes ``beta . a`` constant."""
        rows = []
        for c in self._a:
            row = np.zeros(self.degree + 1)
            row[: len(c) - 1] = c[1:]
            rows.append(row)
        return np.linalg.matrix_rank(np.array(rows), tol=1e-12) < self.dim


def burgers(xi_max: float = 10.0) -> FluxModel:
    """``A(xi) = xi**2 / 2`` in one dimension."""
    return FluxModel(([0.0, 0.0, 0.5],), xi_max)


def eval_A(flux: FluxModel, xi):
    """Evaluate the flux, refusing points outside ``[-xi_max, xi_max]``."""
    xi = np.asarray(xi, dtype=float)
    if np.any(np.abs(xi) > flux.xi_max):
        raise RangeError(f"xi outside [-{flux.xi_max}, {flux.xi_max}]")
    return flux.A(xi)


def beta_directions(dim: int, n_beta: int = 64) -> np.ndarray:
    """Unit directions sampled for the sup over beta; +-1 in one dimension."""
    if dim == 1:
        return np.array([[1.0], [-1.0]])
    theta = 2 * np.pi * np.arange(n_beta) / n_beta
    return np.stack([np.cos(theta), np.sin(theta)], axis=1)


def _xi_cells(flux, n_xi):
    h = 2 * flux.xi_max / n_xi
    return -flux.xi_max + h * (np.arange(n_xi) + 0.5), h


def _sorted_speeds(flux, n_xi, n_beta):
    xi, h = _xi_cells(flux, n_xi)
    speeds = beta_directions(flux.dim, n_beta) @ flux.a(xi)
    return np.sort(speeds, axis=1), h


def _iota_sorted(sorted_speeds, h, eps):
    # Largest number of speed samples inside an open window of width 2*eps:
    # exact sup over alpha for the counted measure.
    best = 0
    idx = np.arange(sorted_speeds.shape[1])
    for row in sorted_speeds:
        hi = np.searchsorted(row, row + 2 * eps, side="left")
        best = max(best, int(np.max(hi - idx)))
    return best * h


def iota(flux: FluxModel, eps: float, n_xi: int = 20001, n_beta: int = 64) -> float:
    """Measure of the set where ``|alpha + beta . a(xi)| < eps``, sup over alpha, beta.

    The measure counts xi-cells whose centre satisfies the inequality. The
    sup over alpha is exact for the counted measure (sliding window over the
    sorted speed samples); beta runs over :func:`beta_directions`.
    """
    if not eps > 0:
        raise ArgumentError("eps must be positive")
    if flux.is_degenerate():
        warnings.warn("flux is degenerate: iota equals the xi-range length", DegenerateFluxWarning, stacklevel=2)
    s, h = _sorted_speeds(flux, n_xi, n_beta)
    return _iota_sorted(s, h, eps)


def eta(flux: FluxModel, eps: float, n_xi: int = 20001, n_beta: int = 64,
        t_cut: float = 30.0, n_t: int = 400) -> float:
    """``int_0^t_cut exp(-t) iota(t * eps) dt`` by trapezoid on log-spaced nodes."""
    if not eps > 0:
        raise ArgumentError("eps must be positive")
    degenerate = flux.is_degenerate()
    if degenerate:
        warnings.warn("flux is degenerate: eta is capped at the xi-range length", DegenerateFluxWarning, stacklevel=2)
    s, h = _sorted_speeds(flux, n_xi, n_beta)
    t = np.concatenate([[0.0], np.geomspace(1e-6, t_cut, n_t)])
    vals = np.array([_iota_sorted(s, h, ti * eps) if ti > 0 else 0.0 for ti in t])
    if degenerate:
        vals[0] = vals[1]
    return float(np.trapezoid(np.exp(-t) * vals, t))


@dataclass
class NondegReport:
    eps_samples: list
    iota_values: list
    eta_values: list
    b_fit: float = float("nan")
    c1_fit: float = float("nan")
    b_eta_fit: float = float("nan")
    c1_eta_fit: float = float("nan")
    degenerate: bool = False

    def rows(self):
        return [
            {"eps": e, "iota": i, "eta": h}
            for e, i, h in zip(self.eps_samples, self.iota_values, self.eta_values)
        ]


def _power_fit(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 4:
        raise ArgumentError("need at least 4 eps samples")
    if np.log10(x.max() / x.min()) < 2 - 1e-9:
        raise ArgumentError("eps samples must span at least two decades")
    if np.any(y <= 0):
        raise NoFitError("non-positive values cannot be fitted in log space")
    b, logc = np.polyfit(np.log(x), np.log(y), 1)
    return float(b), float(np.exp(logc))


def fit_b(report: NondegReport):
    """Least-squares fit ``log iota = log c1 + b log eps``; returns ``(b, c1)``.

    Raises :class:`NoFitError` for a degenerate flux or a fitted exponent
    above ``1 + 0.1`` (b cannot exceed 1 unless ``a`` vanishes).
    """
    if report.degenerate:
        raise NoFitError("degenerate flux has no power-law iota")
    b, c1 = _power_fit(report.eps_samples, report.iota_values)
    if abs(b) < 1e-3:
        raise NoFitError("iota does not decay with eps")
    if b > 1.1:
        raise NoFitError(f"fitted exponent b={b:.3f} exceeds 1")
    return b, c1


def nondegeneracy_sweep(flux: FluxModel, eps_samples, n_xi: int = 20001,
                        n_beta: int = 64, with_eta: bool = True) -> NondegReport:
    """Sample iota and eta on ``eps_samples`` and fit both power laws."""
    eps_samples = sorted(float(e) for e in eps_samples)
    degenerate = flux.is_degenerate()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateFluxWarning)
        s, h = _sorted_speeds(flux, n_xi, n_beta)
        iotas = [_iota_sorted(s, h, e) for e in eps_samples]
        etas = [eta(flux, e, n_xi, n_beta) for e in eps_samples] if with_eta else []
    report = NondegReport(eps_samples, iotas, etas, degenerate=degenerate)
    if not degenerate:
        report.b_fit, report.c1_fit = fit_b(report)
        if with_eta:
            report.b_eta_fit, report.c1_eta_fit = _power_fit(eps_samples, etas)
    return report


@dataclass(frozen=True)
class GrowthClass:
    kind: str  # "sub-quadratic" | "sub-cubic" | "super-cubic"
    constant: float

    @property
    def in_uniqueness_regime(self) -> bool:
        return self.kind == "sub-quadratic"


def classify_growth(flux: FluxModel, n_scan: int = 20001) -> GrowthClass:
    """Classify by the degree of ``a'`` and report the smallest valid constant.

    Sub-quadratic: ``|a'| <= c2``; sub-cubic: ``|a'| <= c1 (|xi| + 1)``. The
    constant is the max over the xi range of ``|a'|`` (resp.
    ``|a'| / (1 + |xi|)``). Super-cubic fluxes get the latter ratio and a
    warning.
    """
    deg = max(len(_trim(c)) - 1 for c in flux._da)
    if all(not np.any(c) for c in flux._da):
        deg = -1
    xi = np.linspace(-flux.xi_max, flux.xi_max, n_scan)
    mag = np.sqrt(np.sum(flux.da(xi) ** 2, axis=0))
    if deg <= 0:
        return GrowthClass("sub-quadratic", float(mag.max()))
    c = float(np.max(mag / (1 + np.abs(xi))))
    if deg == 1:
        return GrowthClass("sub-cubic", c)
    warnings.warn("flux is super-cubic: outside the existence theory", OutOfTheoremWarning, stacklevel=2)
    return GrowthClass("super-cubic", c)
