import math
from fractions import Fraction
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import periodized_cauchy, periodized_gaussian
from stoscl.errors import ArgumentError, InsufficientDataError, IntegrityError
from stoscl.flux import FluxModel, burgers
from stoscl.noise import build_default
from stoscl.solver import SolverConfig, State, TorusGrid
from stoscl.spectral import (
    History,
    QRecord,
    SemigroupParams,
    SpectralField,
    XiGrid,
    apply_S,
    compute_P,
    compute_Q,
    compute_u0,
    compute_uflat,
    decay_bound_check,
    decompose,
    index_arithmetic,
    kernel_K,
    kernel_values,
    oscillatory_G,
    record_history,
    smoothing_bound_check,
    sobolev_norm,
    support_exponent,
    wavevectors,
)

X = np.linspace(-0.5, 0.5, 401)
LINEAR = FluxModel([0.0, 1.0], 3.0)


def _sine(grid, amp=1.0):
    return grid.sample(lambda x: amp * np.sin(2 * np.pi * x))


# --- kernels -------------------------------------------------------------

@pytest.mark.parametrize("t", [0.01, 0.1, 1.0])
def test_kernel_gaussian(t):
    k = kernel_values(SemigroupParams(1.0, 0.0, 1.0), t, X)
    assert np.max(np.abs(k - periodized_gaussian(t, X))) < 1e-8


@pytest.mark.parametrize("t", [0.05, 0.3, 1.0])
def test_kernel_cauchy(t):
    k = kernel_values(SemigroupParams(1.0, 0.0, 0.5), t, X)
    assert np.max(np.abs(k - periodized_cauchy(t, X))) < 1e-6


@pytest.mark.parametrize("alpha", [0.5, 1.0])
def test_kernel_mass_and_positivity(alpha):
    grid = TorusGrid(1, 256)
    for t in (0.1, 0.5):
        k = kernel_K(SemigroupParams(1.0, 0.0, alpha), t, grid)
        assert k.coeffs[0] == 1.0
        assert k.to_real().mean() == pytest.approx(1.0, abs=1e-12)
        assert np.min(kernel_values(SemigroupParams(1.0, 0.0, alpha), t, X)) > 0


def test_kernel_two_dimensional_factorizes():
    x = np.stack(np.meshgrid(X[::20], X[::20], indexing="ij"))
    k = kernel_values(SemigroupParams(1.0, 0.0, 1.0), 0.1, x, N=2)
    ref = periodized_gaussian(0.1, x[0]) * periodized_gaussian(0.1, x[1])
    assert np.max(np.abs(k - ref)) < 1e-8


def test_kernel_rejects_nonpositive_time():
    with pytest.raises(ArgumentError):
        kernel_K(SemigroupParams(), 0.0, TorusGrid(1, 16))
    with pytest.raises(ArgumentError):
        kernel_values(SemigroupParams(), -1.0, X)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.001, 0.5), st.floats(0.001, 0.5), st.floats(0.1, 1.0))
def test_kernel_semigroup(t1, t2, alpha):
    p = SemigroupParams(1.0, 0.0, alpha)
    grid = TorusGrid(1, 64)
    prod = kernel_K(p, t1, grid).coeffs * kernel_K(p, t2, grid).coeffs
    both = kernel_K(p, t1 + t2, grid).coeffs
    # the truncation only removes terms below 1e-16
    assert np.max(np.abs(prod - both)) < 1e-15


# --- smoothing -----------------------------------------------------------

def test_smoothing_l2_contraction():
    r = smoothing_bound_check(SemigroupParams(1.0, 0.0, 0.5), 2, 2, 0)
    assert r.exponent == pytest.approx(0.0, abs=1e-9)
    assert r.passed
    assert np.all(r.random_estimates <= r.norms * (1 + 1e-9))


def test_smoothing_l1_to_linf_heat():
    r = smoothing_bound_check(SemigroupParams(1.0, 0.0, 1.0), 1, "inf", 0)
    assert r.exponent == pytest.approx(-0.5, abs=0.05)
    assert r.passed


def test_smoothing_gradient_half_laplacian():
    r = smoothing_bound_check(SemigroupParams(1.0, 0.0, 0.5), 2, 2, 1)
    assert r.exponent == pytest.approx(-1.0, abs=0.05)
    assert r.passed


@pytest.mark.parametrize("pair", [(1, 1), (1, 2), (2, "inf"), ("inf", "inf")])
def test_smoothing_other_pairs_pass(pair):
    assert smoothing_bound_check(SemigroupParams(1.0, 0.0, 0.75), *pair, 0).passed


def test_smoothing_rejects_unsupported():
    with pytest.raises(ArgumentError):
        smoothing_bound_check(SemigroupParams(), 2, 1, 0)
    with pytest.raises(ArgumentError):
        smoothing_bound_check(SemigroupParams(), 2, 2, 2)


# --- semigroup action ----------------------------------------------------

def _random_field(grid, seed, band=8):
    rng = np.random.default_rng(seed)
    c = np.fft.fft(rng.standard_normal(grid.shape), norm="forward")
    c[np.abs(wavevectors(grid)[0]) > band] = 0
    return SpectralField(grid, c)


def test_apply_S_identity_and_zero_mode():
    grid = TorusGrid(1, 64)
    f = _random_field(grid, 1)
    p = SemigroupParams(0.7, 0.4, 0.5)
    assert np.array_equal(apply_S(p, f, 0.3, 0.0, burgers()).coeffs, f.coeffs)
    g = apply_S(p, f, 0.3, 0.8, burgers())
    assert g.coeffs[0] == pytest.approx(math.exp(-0.4 * 0.8) * f.coeffs[0], rel=1e-14)


def test_apply_S_pure_transport_is_shift():
    grid = TorusGrid(1, 128)
    f = _random_field(grid, 2)
    flux = FluxModel([0.0, 0.0, 0.5], 5.0)  # a(xi) = xi
    xi, t = 0.7, 0.9
    out = apply_S(SemigroupParams(0.0, 0.0, 0.5), f, xi, t, flux)
    n = wavevectors(grid)[0]
    shifted = np.fft.ifft(f.coeffs * np.exp(-2j * np.pi * n * xi * t), norm="forward").real
    x = np.arange(grid.M) * grid.dx  # FFT phase origin sits at the first cell
    ref = sum(f.coeffs[k] * np.exp(2j * np.pi * n[k] * (x - xi * t)) for k in range(grid.M)).real
    assert np.max(np.abs(out.to_real() - ref)) < 1e-8
    assert np.allclose(out.to_real(), shifted)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(-2, 2))
def test_apply_S_semigroup(t1, t2, xi):
    grid = TorusGrid(1, 32)
    f = _random_field(grid, 3)
    p = SemigroupParams(0.5, 0.3, 0.75)
    a = apply_S(p, apply_S(p, f, xi, t1, burgers()), xi, t2, burgers())
    b = apply_S(p, f, xi, t1 + t2, burgers())
    assert np.max(np.abs(a.coeffs - b.coeffs)) <= 1e-12


def test_apply_S_rejects_negative_time():
    grid = TorusGrid(1, 16)
    with pytest.raises(ArgumentError):
        apply_S(SemigroupParams(), _random_field(grid, 0), 0.0, -0.1, burgers())


# --- oscillatory integrals ----------------------------------------------

def _indicator(xi):
    return ((xi >= 0) & (xi <= 1)).astype(float)


@pytest.mark.parametrize("z", [0.5, 3.0, 20.0])
def test_G_closed_form(z):
    flux = FluxModel([0.0, 0.0, 0.5], 2.0)
    val = oscillatory_G(flux, _indicator, None, [z], support=(0.0, 1.0))
    assert abs(val - (1 - np.exp(-1j * z)) / (1j * z)) < 1e-7


def test_G_zero_and_modulus():
    flux = burgers()
    phi = lambda xi: np.exp(-xi * xi)  # noqa: E731
    assert oscillatory_G(flux, phi, None, [0.0], support=(-1, 1)).real == pytest.approx(
        math.sqrt(math.pi) * math.erf(1.0), rel=1e-8)
    total = math.sqrt(math.pi) * math.erf(1.0)
    for z in np.linspace(-10, 10, 9):
        assert abs(oscillatory_G(flux, phi, None, [z], support=(-1, 1))) <= total + 1e-8


def test_G_with_wavevector_argument():
    flux = FluxModel([0.0, 0.0, 0.5], 2.0)
    val = oscillatory_G(flux, lambda n, xi: n * _indicator(xi), 2, [0.0], support=(0.0, 1.0))
    assert val.real == pytest.approx(2.0, abs=1e-8)


def test_decay_bound_burgers():
    rep = decay_bound_check(FluxModel([0.0, 0.0, 0.5], 2.0), _indicator, omegas=(1.0,), support=(0.0, 1.0))
    assert rep.passed and not rep.skipped
    assert rep.lhs[0] < rep.rhs[0]


def test_decay_bound_zero_profile_and_degenerate():
    rep = decay_bound_check(burgers(), lambda xi: 0 * xi, omegas=(1.0,))
    assert rep.lhs[0] == 0 and rep.passed
    rep = decay_bound_check(FluxModel([0.0, 2.0], 3.0), _indicator)
    assert rep.skipped and not rep.passed


# --- decomposition parts ------------------------------------------------

def test_u0_transport_oracle():
    grid = TorusGrid(1, 128)
    u0 = _sine(grid)
    t = [0.0, 0.3, 0.55]
    ser = compute_u0(SemigroupParams(0.0, 0.0, 0.5), State(grid, u0), LINEAR, t)
    for i, ti in enumerate(t):
        ref = np.sin(2 * np.pi * (grid.coords[0] - ti))
        assert np.max(np.abs(ser.field(i).to_real() - ref)) < 1e-6


def test_u0_zero_and_damped():
    grid = TorusGrid(1, 64)
    ser = compute_u0(SemigroupParams(), State(grid, np.zeros(64)), burgers(), [0.0, 0.5])
    assert np.all(ser.coeffs == 0)
    u0 = _sine(grid, 2.0)
    p = SemigroupParams(0.5, 0.8, 0.5)
    times = np.linspace(0, 1, 6)
    ser = compute_u0(p, State(grid, u0), burgers(2.5), times)
    l2 = math.sqrt(np.mean(u0**2))
    for i, t in enumerate(times):
        f = ser.field(i)
        assert abs(f.mean) < 1e-14
        assert f.l2() <= math.exp(-0.8 * t) * l2 * (1 + 1e-9)


def test_u0_rejects_nonzero_mean():
    grid = TorusGrid(1, 16)
    with pytest.raises(ArgumentError):
        compute_u0(SemigroupParams(), State(grid, np.ones(16)), burgers(), [0.1])


def _frozen_history(grid, u, steps=40, dt=1e-3):
    """A history whose state never changes."""
    uu = np.repeat(u[None], steps + 1, axis=0)
    t = dt * np.arange(steps + 1)
    return History(grid, 0.0, t, np.full(steps, dt), uu, uu[1:].copy())


def test_uflat_stationary_closed_form():
    grid = TorusGrid(1, 64)
    u = _sine(grid, 0.8)
    h = _frozen_history(grid, u, steps=200, dt=5e-3)
    p = SemigroupParams(1.0, 0.5, 0.5)
    xi = XiGrid(1.0, 64)
    ser = compute_uflat(p, h, LINEAR, None, xi)
    n = wavevectors(grid)[0]
    sym = p.symbol(np.abs(n)) + p.delta
    lam = 2j * np.pi * n + sym
    f_hat = np.fft.fft(u, norm="forward")
    for i in (10, 100, 200):
        t = h.t[i]
        ref = sym / lam * (1 - np.exp(-lam * t)) * f_hat
        assert np.max(np.abs(ser.coeffs[i] - ref)) < 1e-12
        assert abs(ser.coeffs[i][0]) < 1e-15


def test_uflat_vanishes_without_damping():
    grid = TorusGrid(1, 32)
    h = _frozen_history(grid, _sine(grid))
    ser = compute_uflat(SemigroupParams(0.0, 0.0, 0.5), h, burgers(), None)
    assert np.all(ser.coeffs == 0)


def test_uflat_needs_enough_steps():
    grid = TorusGrid(1, 32)
    with pytest.raises(InsufficientDataError):
        compute_uflat(SemigroupParams(), _frozen_history(grid, _sine(grid), steps=5), burgers(), None)


def test_uflat_rejects_coarse_cadence():
    grid = TorusGrid(1, 32)
    with pytest.raises(InsufficientDataError):
        compute_uflat(SemigroupParams(), _frozen_history(grid, _sine(grid), dt=0.05), burgers(), None)


def _noisy_history(M=64, t_end=0.2, seed=3, flux=None, eta=0.02, amp=0.5):
    grid = TorusGrid(1, M)
    noise = build_default(4, 2.0, 1, seed, D0=1.0)
    path = noise.path(0)
    flux = flux or burgers(4.0)
    h = record_history(State(grid, _sine(grid, amp)), SolverConfig(eta=eta, t_end=t_end), flux, path)
    return h, path, flux


def test_P_linear_flux_matches_scalar_recursion():
    h, path, flux = _noisy_history(flux=LINEAR)
    p = SemigroupParams(1.0, 0.5, 0.5)
    ser = compute_P(p, h, path, flux, None)
    n = wavevectors(h.grid)[0]
    lam = 2j * np.pi * n + p.symbol(np.abs(n)) + p.delta
    Y = np.zeros(h.grid.M, dtype=complex)
    for k, dt in enumerate(h.dt):
        Y = np.exp(-lam * dt) * Y + np.fft.fft(h.increments[k], norm="forward")
        assert np.max(np.abs(ser.coeffs[k + 1] - Y)) < 1e-12
    assert np.all(np.abs(ser.coeffs[:, 0]) < 1e-15)


def test_P_zero_noise_and_integrity():
    h, path, flux = _noisy_history()
    grid = h.grid
    quiet = path.model.scaled(0.0).path(0)
    h0 = record_history(State(grid, _sine(grid, 0.5)), SolverConfig(eta=0.02, t_end=0.1), flux, quiet)
    assert np.all(compute_P(SemigroupParams(), h0, quiet, flux, None).coeffs == 0)
    with pytest.raises(IntegrityError):
        compute_P(SemigroupParams(), replace(h, increment_hash="0" * 64), path, flux, None)
    with pytest.raises(IntegrityError):
        compute_P(SemigroupParams(), h, path.model.path(1), flux, None)


def test_Q_single_atom():
    grid = TorusGrid(1, 32)
    xi = XiGrid(1.0, 16)
    j0, i0, s0, w = 11, 5, 0.1, 0.7
    xi0 = xi.nodes[j0]
    u = np.zeros((1, 32))
    u[0, :] = xi0
    wts = np.zeros((1, 32))
    wts[0, i0] = w
    rec = QRecord(grid, np.array([s0]), u, wts)
    p = SemigroupParams(0.6, 0.2, 0.5)
    flux = burgers(2.0)
    times = [0.05, 0.3, 0.8]
    ser = compute_Q(p, rec, flux, times, xi)
    n = wavevectors(grid)[0]
    lam = 2j * np.pi * n * xi0 + p.symbol(np.abs(n)) + p.delta
    w_hat = w / 32 * np.exp(-2j * np.pi * n * i0 / 32)
    assert np.all(ser.coeffs[0] == 0)
    for i, t in enumerate(times[1:], start=1):
        ref = 2j * np.pi * n * 1.0 * (t - s0) * np.exp(-lam * (t - s0)) * w_hat
        assert np.max(np.abs(ser.coeffs[i] - ref)) < 1e-14


def test_Q_needs_atoms():
    with pytest.raises(InsufficientDataError):
        compute_Q(SemigroupParams(), object(), burgers(), [0.1])


def test_Q_vanishes_before_shock():
    grid = TorusGrid(1, 256)
    h = record_history(State(grid, _sine(grid, 0.5)), SolverConfig(eta=0.0, t_end=0.2), burgers(1.0))
    res = decompose(SemigroupParams(), h, burgers(1.0), times=h.t[::10])
    assert np.max(np.abs(res.Q_part.real())) < 1e-3 * np.mean(np.abs(h.u[-1]))


def test_decompose_linear_flux_residual():
    grid = TorusGrid(1, 256)
    h = record_history(State(grid, _sine(grid)), SolverConfig(eta=1e-3, t_end=0.5), LINEAR)
    res = decompose(SemigroupParams(0.1, 0.1, 0.5), h, LINEAR, times=h.t[::20])
    assert np.max(res.residual) <= 0.05
    assert res.residual[0] <= XiGrid(1.05).h
    for part in res.parts().values():
        assert np.max(np.abs(part.coeffs[:, 0])) < 1e-12


def test_decompose_noisy_requires_path_and_is_small():
    h, path, flux = _noisy_history(M=128, t_end=0.3)
    with pytest.raises(ArgumentError):
        decompose(SemigroupParams(), h, flux, times=h.t[::10])
    res = decompose(SemigroupParams(), h, flux, path, times=h.t[::10])
    assert res.residual[0] < 1e-12
    # diagnostic level only; tight bound on this small run
    assert np.median(res.residual) < 0.15
    assert set(res.parts()) == {"u0", "uflat", "visc", "P", "Q"}


# --- norms and indices ---------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([1, 2]))
def test_parseval_and_hermitian(seed, N):
    grid = TorusGrid(N, 16 if N == 2 else 64)
    u = np.random.default_rng(seed).standard_normal(grid.shape)
    f = SpectralField.from_real(grid, u)
    assert f.l2() == pytest.approx(f.l2_space(), rel=1e-10)
    assert sobolev_norm(f, 0.0) == pytest.approx(f.l2_space(), rel=1e-10)
    assert f.hermitian_defect() < 1e-12
    assert np.allclose(f.to_real(), u, atol=1e-12)


def test_sobolev_single_mode():
    grid = TorusGrid(1, 32)
    c = np.zeros(32, dtype=complex)
    c[1] = 1.0
    assert sobolev_norm(SpectralField(grid, c), 1.0) == pytest.approx(math.sqrt(1 + 4 * math.pi**2))


def test_index_optimum_one_dimension():
    s = support_exponent(1.0, 1)
    assert s["alpha"] == pytest.approx(0.4)
    idx = index_arithmetic(s["alpha"], 1.0, 1, s["q"])
    assert idx.s_max == pytest.approx(0.1, abs=1e-12)
    assert idx.r_bound == pytest.approx(2.5, abs=1e-12)
    assert not idx.empty


@settings(max_examples=50)
@given(st.floats(0.05, 1.0), st.floats(0.3, 0.49))
def test_index_optimum_is_maximal(b, alpha):
    best = support_exponent(b, 1)
    assert index_arithmetic(alpha, b, 1).s_max <= best["s_max"] + 1e-12
    assert index_arithmetic(best["alpha"], b, 1).s_max == pytest.approx(b / (2 * (b + 4)), rel=1e-12)


@pytest.mark.parametrize("N", [2, 3, 4])
def test_support_exponent_higher_dimension(N):
    assert support_exponent(0.5, N)["r_bound"] == Fraction(N, N - 1)


def test_index_mu_and_errors():
    idx = index_arithmetic(0.5, 1.0, 1, lam=0.5, p=2.0)
    assert idx.mu == pytest.approx(2 - 2.5 / 1.0 + 1 / 2.0)
    assert index_arithmetic(0.9, 1.0, 1).empty
    with pytest.raises(ArgumentError):
        index_arithmetic(0.0, 1.0, 1)
