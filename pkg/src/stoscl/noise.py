"""Additive trigonometric forcing ``Phi dW = sum_k g_k dbeta_k``.

Each ``g_k`` is ``sigma_k cos(2 pi n_k . x)`` or ``sigma_k sin(2 pi n_k . x)``
with a nonzero integer wavevector, so every mode integrates to zero on the
torus. Wiener increments come from Philox streams keyed by
``(seed_root, path_index)``; the counter encodes the step, so a given
``(seed_root, path_index, step, k)`` always yields the same normal no matter
in which order or in which batch steps are queried.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError

__all__ = ["Mode", "NoiseModel", "NoisePath", "build_default", "compute_D1", "sample_increment"]

_TWO_PI = 2 * np.pi


@dataclass(frozen=True)
class Mode:
    wavevector: tuple
    amplitude: float
    parity: str  # "cos" | "sin"

    def __post_init__(self):
        wv = tuple(int(v) for v in self.wavevector)
        if not any(wv):
            raise ArgumentError("noise wavevector must be nonzero")
        if self.amplitude < 0 or not np.isfinite(self.amplitude):
            raise ArgumentError("noise amplitude must be finite and >= 0")
        if self.parity not in ("cos", "sin"):
            raise ArgumentError("parity must be 'cos' or 'sin'")
        object.__setattr__(self, "wavevector", wv)
        object.__setattr__(self, "amplitude", float(self.amplitude))

    def __call__(self, x):
        """Evaluate on coordinates ``x`` of shape ``(N, ...)``."""
        phase = _TWO_PI * sum(n * xd for n, xd in zip(self.wavevector, x))
        trig = np.cos(phase) if self.parity == "cos" else np.sin(phase)
        return self.amplitude * trig


@dataclass(frozen=True)
class NoiseModel:
    modes: tuple
    seed_root: int = 0
    dim: int = 1

    def __post_init__(self):
        modes = tuple(self.modes)
        for m in modes:
            if len(m.wavevector) != self.dim:
                raise ArgumentError("wavevector length must equal the space dimension")
        if not 0 <= int(self.seed_root) < 2**64:
            raise ArgumentError("seed_root must fit in 64 bits")
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "seed_root", int(self.seed_root))

    @property
    def K(self) -> int:
        return len(self.modes)

    @property
    def D0(self) -> float:
        """``sup_x sum_k g_k(x)**2``.

        Modes sharing a wavevector combine as ``c**2 cos**2 + s**2 sin**2``
        whose sup is ``max(c**2, s**2)``; the sum over wavevectors is exact
        when cos/sin pairs have equal amplitudes (then G^2 is constant) and an
        upper bound otherwise.
        """
        by_wv = {}
        for m in self.modes:
            c, s = by_wv.get(m.wavevector, (0.0, 0.0))
            if m.parity == "cos":
                c += m.amplitude**2
            else:
                s += m.amplitude**2
            by_wv[m.wavevector] = (c, s)
        return float(sum(max(c, s) for c, s in by_wv.values()))

    @property
    def D1(self) -> float:
        return compute_D1(self)

    @property
    def l2_input_rate(self) -> float:
        """``sum_k ||g_k||_{L^2}^2``; each trig mode contributes ``sigma**2 / 2``."""
        return float(sum(0.5 * m.amplitude**2 for m in self.modes))

    def G2(self, x):
        return sum(m(x) ** 2 for m in self.modes) if self.modes else np.zeros(np.shape(x)[1:])

    def basis(self, grid):
        """``(K, *grid.shape)`` array of the modes at cell centres."""
        x = grid.coords
        if not self.modes:
            return np.zeros((0,) + grid.shape)
        return np.stack([m(x) for m in self.modes])

    def scaled(self, factor: float) -> "NoiseModel":
        modes = tuple(Mode(m.wavevector, m.amplitude * factor, m.parity) for m in self.modes)
        return NoiseModel(modes, self.seed_root, self.dim)

    def path(self, path_index: int) -> "NoisePath":
        return NoisePath(self, path_index)


def _half_lattice(dim):
    """Nonzero integer vectors, one of each +-n pair, ordered by length."""
    if dim == 1:
        for n in itertools.count(1):
            yield (n,)
    shell = 1
    while True:
        pts = []
        for v in itertools.product(range(-shell, shell + 1), repeat=dim):
            if max(abs(c) for c in v) != shell:
                continue
            first = next(c for c in v if c != 0)
            if first > 0:
                pts.append(v)
        pts.sort(key=lambda v: (sum(c * c for c in v), v))
        yield from pts
        shell += 1


def build_default(K: int = 8, decay_exponent: float = 2.0, N: int = 1,
                  seed_root: int = 0, D0: float | None = None) -> NoiseModel:
    """Paired cos/sin modes on the first ``K // 2`` wavevectors.

    Amplitudes are ``|n|**(-decay_exponent)``; when ``D0`` is given they are
    rescaled so that ``sup_x G^2`` equals it.
    """
    if K < 2 or K % 2:
        raise ArgumentError("K must be an even integer >= 2")
    modes = []
    for wv in itertools.islice(_half_lattice(N), K // 2):
        sigma = float(np.sqrt(sum(c * c for c in wv))) ** (-decay_exponent)
        modes.append(Mode(wv, sigma, "cos"))
        modes.append(Mode(wv, sigma, "sin"))
    model = NoiseModel(tuple(modes), seed_root, N)
    if D0 is not None:
        if D0 < 0:
            raise ArgumentError("D0 must be non-negative")
        model = model.scaled(np.sqrt(D0 / model.D0))
    return model


def compute_D1(model: NoiseModel) -> float:
    """Lipschitz constant ``sum_k sigma_k**2 (2 pi |n_k|)**2`` of the covariance."""
    return float(sum(m.amplitude**2 * _TWO_PI**2 * sum(c * c for c in m.wavevector) for m in model.modes))


def empirical_D1(model: NoiseModel, n_pairs: int = 1000, seed: int = 0) -> float:
    """Largest ``sum_k |g_k(x) - g_k(y)|^2 / |x - y|^2`` over random torus pairs."""
    rng = np.random.default_rng(seed)
    x = rng.random((model.dim, n_pairs))
    y = x + rng.normal(scale=0.05, size=x.shape)
    num = sum((m(x) - m(y)) ** 2 for m in model.modes)
    den = np.sum((x - y) ** 2, axis=0)
    return float(np.max(num / den)) if model.modes else 0.0


_U53 = 2.0**-53


def _normals_from_raw(raw):
    """Box-Muller on 53-bit uniforms in (0, 1); ``raw`` has even length."""
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * _U53
    u1, u2 = u[0::2], u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    out = np.empty(raw.size)
    out[0::2] = r * np.cos(_TWO_PI * u2)
    out[1::2] = r * np.sin(_TWO_PI * u2)
    return out


@dataclass(frozen=True)
class NoisePath:
    """Stateless access to the Wiener increments of one path."""

    model: NoiseModel
    path_index: int
    _blocks: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        # Philox4x64 emits 4 words per counter value; 4 normals per block
        object.__setattr__(self, "_blocks", max(1, -(-self.model.K // 4)))

    def normals(self, step: int, count: int = 1) -> np.ndarray:
        """Standard normals for steps ``step .. step+count-1``; shape ``(count, K)``."""
        K = self.model.K
        if K == 0:
            return np.zeros((count, 0))
        if step < 0:
            raise ArgumentError("step must be non-negative")
        bg = np.random.Philox(key=[self.model.seed_root, int(self.path_index)],
                              counter=[int(step) * self._blocks, 0, 0, 0])
        raw = bg.random_raw(4 * self._blocks * count)
        z = _normals_from_raw(raw).reshape(count, 4 * self._blocks)
        return z[:, :K]

    def increment(self, step: int, dt: float, basis: np.ndarray) -> np.ndarray:
        """Mean-projected field ``sum_k g_k xi_k sqrt(dt)`` for one step."""
        if not dt > 0:
            raise ArgumentError("dt must be positive")
        z = self.normals(step)[0]
        return _combine(z[None, :], np.array([dt]), basis)[0]


def _combine(z, dt, basis):
    """Fields for a batch: ``z`` is ``(B, K)``, ``dt`` is ``(B,)``.

    Avoids BLAS so each row is bitwise independent of the batch it is
    computed in.
    """
    zs = z * np.sqrt(dt)[:, None]
    # elementwise product then a strided sum over k: fixed order per element
    out = (zs.reshape(zs.shape + (1,) * (basis.ndim - 1)) * basis[None]).sum(axis=1)
    axes = tuple(range(1, out.ndim))
    out -= out.mean(axis=axes, keepdims=True)
    return out


def sample_increment(path: NoisePath, step: int, dt: float, grid) -> np.ndarray:
    """Increment field ``Phi dW`` on ``grid`` for ``step``, projected to zero grid mean."""
    return path.increment(step, dt, path.model.basis(grid))


class IncrementStream:
    """Buffered sequential reader of one path's normals (block prefetch)."""

    def __init__(self, path: NoisePath, block: int = 512):
        self.path = path
        self.block = block
        self._start = 0
        self._buf = path.normals(0, block)

    def at(self, step: int) -> np.ndarray:
        if not self._start <= step < self._start + self.block:
            self._start = step - step % self.block
            self._buf = self.path.normals(self._start, self.block)
        return self._buf[step - self._start]
