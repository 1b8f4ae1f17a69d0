import math

import numpy as np
import pytest

from stoscl.errors import ArgumentError
from stoscl.flux import FluxModel, burgers
from stoscl.noise import build_default
from stoscl.solver import SolverConfig, TorusGrid
from stoscl.ensemble import (
    EnsembleConfig,
    coupling_experiment,
    hitting_times,
    krylov_bogoliubov_check,
    moment_report,
    run_ensemble,
    sine_initial,
    small_noise_experiment,
    zero_initial,
)

GRID = TorusGrid(1, 32)
FLUX = burgers(8.0)
NOISE = build_default(4, 2.0, 1, 5, D0=1.0)


def _cfg(**kw):
    base = dict(paths=4, burn_in=1.0, horizon=4.0, sample_interval=0.25,
                observables=("L1", "L2", "Lr", "dissipation_rate"))
    base.update(kw)
    return EnsembleConfig(**base)


def test_config_problems_listed():
    with pytest.raises(ArgumentError) as exc:
        EnsembleConfig(paths=1, burn_in=5, horizon=2, observables=("bogus",))
    msg = str(exc.value)
    assert "paths" in msg and "burn_in" in msg and "bogus" in msg


def test_deterministic_decay_to_zero():
    m = run_ensemble(_cfg(paths=2, burn_in=10.0, horizon=20.0, sample_interval=1.0),
                     SolverConfig(), None, sine_initial(1.0), TorusGrid(1, 64), burgers(2.0))
    assert m.path_average("L1", -1)[0] < 0.01
    assert moment_report(m, 1)[0] < 0.05
    # with no forcing every path is identical
    assert np.array_equal(m.samples["L1"][0], m.samples["L1"][1])


def test_identical_seeds_identical_statistics():
    a = run_ensemble(_cfg(), SolverConfig(), NOISE, sine_initial(), GRID, FLUX)
    b = run_ensemble(_cfg(), SolverConfig(), build_default(4, 2.0, 1, 5, D0=1.0), sine_initial(), GRID, FLUX)
    for k in a.samples:
        assert np.array_equal(a.samples[k], b.samples[k])
    c = run_ensemble(_cfg(), SolverConfig(), build_default(4, 2.0, 1, 6, D0=1.0), sine_initial(), GRID, FLUX)
    assert not np.array_equal(a.samples["L1"], c.samples["L1"])


def test_worker_count_does_not_change_results():
    kin = {"window": 1.0, "xi_max": 2.0, "nbins": 16}
    a = run_ensemble(_cfg(workers=1), SolverConfig(), NOISE, sine_initial(), GRID, FLUX, kinetic=kin)
    b = run_ensemble(_cfg(workers=2), SolverConfig(), NOISE, sine_initial(), GRID, FLUX, kinetic=kin)
    for k in a.samples:
        assert np.array_equal(a.samples[k], b.samples[k])
    for k in a.counts:
        assert np.array_equal(a.counts[k], b.counts[k])
    assert np.array_equal(a.kinetic.mass_m, b.kinetic.mass_m)


def test_measure_bookkeeping():
    m = run_ensemble(_cfg(), SolverConfig(), NOISE, zero_initial, GRID, FLUX)
    assert m.times[-1] == pytest.approx(4.0)
    n_post = int(m.post.sum())
    for k, c in m.counts.items():
        assert c.sum() == 4 * n_post
    assert np.allclose(m.samples["mean"], 0.0, atol=1e-12)
    # L1 <= Lr on a probability space
    assert np.all(m.samples["L1"] <= m.samples["Lr"] * (1 + 1e-12))
    mean, se, n = m.time_average("L2")
    assert n == 4 * n_post and se >= 0 and mean > 0
    assert len(m.summary()) == len(m.samples)


def test_moment_report_sources():
    m = run_ensemble(_cfg(), SolverConfig(), NOISE, zero_initial, GRID, FLUX)
    assert moment_report(m, 2)[0] == pytest.approx(float(np.mean(m.values("L2") ** 2)))
    assert moment_report(m, 2.4)[0] == pytest.approx(float(np.mean(m.values("Lr") ** 2.4)))
    with pytest.raises(ArgumentError):
        moment_report(m, 3.0)
    with pytest.raises(ArgumentError):
        moment_report(m, 0.5)


def test_stationary_split_window():
    cfg = EnsembleConfig(paths=16, burn_in=10.0, horizon=70.0, sample_interval=0.5, observables=("L2",))
    m = run_ensemble(cfg, SolverConfig(eta=0.02), NOISE, zero_initial, GRID, FLUX)
    v = m.values("L2") ** 2
    half = v.shape[1] // 2
    a, b = v[:, :half].mean(), v[:, half:].mean()
    assert abs(a - b) / max(a, b) < 0.1


def test_krylov_bogoliubov_agreement():
    long = run_ensemble(EnsembleConfig(paths=2, burn_in=10.0, horizon=200.0, sample_interval=0.5,
                                       observables=("L2",)), SolverConfig(eta=0.02), NOISE, zero_initial,
                        GRID, FLUX)
    ens = run_ensemble(EnsembleConfig(paths=32, burn_in=0.0, horizon=20.0, sample_interval=1.0,
                                      observables=("L2",)), SolverConfig(eta=0.02), NOISE, zero_initial,
                       GRID, FLUX)
    m1, s1, m2, s2, ok = krylov_bogoliubov_check(long, ens, "L2")
    assert ok, (m1, s1, m2, s2)


def test_coupling_equal_starts_and_contraction():
    u = sine_initial(2.0)(0, GRID)
    rec = coupling_experiment(u, u, _cfg(), SolverConfig(), NOISE, GRID, FLUX)
    assert np.all(rec.diffs == 0)
    rec = coupling_experiment(np.zeros(GRID.shape), u, _cfg(horizon=10.0), SolverConfig(), NOISE, GRID, FLUX)
    assert np.all(rec.monotone())
    assert rec.diffs.shape == (4, 41)
    assert not rec.out_of_theorem
    assert 0 <= rec.fraction_coupled <= 1


def test_coupling_cubic_flag():
    cubic = FluxModel([0.0, 0.0, 0.0, 1.0 / 3.0], 8.0)
    u = sine_initial(0.5)(0, GRID)
    rec = coupling_experiment(np.zeros(GRID.shape), u, _cfg(paths=2, burn_in=0.0, horizon=1.0), SolverConfig(), NOISE,
                              GRID, cubic)
    assert rec.out_of_theorem


def test_hitting_trivial_cases():
    z = np.zeros(GRID.shape)
    rec = hitting_times(z, z, 1.0, _cfg(), SolverConfig(), NOISE, GRID, FLUX)
    assert np.all(rec.times == 0)
    u = sine_initial(0.1)(0, GRID)
    rec = hitting_times(u, u, 0.0, _cfg(horizon=2.0), SolverConfig(), NOISE, GRID, FLUX)
    assert np.all(rec.censored) and rec.censoring_fraction() == 1.0
    with pytest.raises(ArgumentError):
        hitting_times(z, z, -1.0, _cfg(), SolverConfig(), NOISE, GRID, FLUX)


def test_hitting_censoring_decreases_with_horizon():
    u = sine_initial(10 * math.pi / 2)(0, GRID)
    rec = hitting_times(u, u, 0.2, EnsembleConfig(paths=8, burn_in=0.0, horizon=20.0, sample_interval=0.1),
                        SolverConfig(eta=0.02), NOISE, GRID, FLUX)
    fr = [rec.censoring_fraction(h) for h in (2.5, 5.0, 10.0, 20.0)]
    assert all(b <= a for a, b in zip(fr, fr[1:]))
    assert fr[-1] < fr[0]
    t, s = rec.survival()
    assert np.all(np.diff(s) <= 0) and np.all(s >= 0)


def test_small_noise_threshold_cases():
    cfg = _cfg(paths=8, horizon=3.0)
    rep = small_noise_experiment(cfg, SolverConfig(), NOISE, GRID, FLUX, sine_initial(), threshold=1e9)
    assert rep.n_qualifying == 8
    assert rep.conditional_mean == pytest.approx(rep.unconditional_mean)
    rep = small_noise_experiment(cfg, SolverConfig(), NOISE, GRID, FLUX, sine_initial())
    assert rep.n_qualifying >= 1 and rep.threshold <= np.max(rep.noise_sup)
    with pytest.warns(RuntimeWarning):
        rep = small_noise_experiment(cfg, SolverConfig(), NOISE, GRID, FLUX, sine_initial(), threshold=-1.0)
    assert rep.n_qualifying == 0 and math.isnan(rep.conditional_mean)


def test_small_noise_without_forcing_decays():
    rep = small_noise_experiment(_cfg(paths=2, horizon=20.0), SolverConfig(), None, TorusGrid(1, 64),
                                 burgers(2.0), sine_initial())
    assert np.all(rep.noise_sup == 0)
    assert rep.unconditional_mean < 0.1


def test_small_noise_conditioning_lowers_mean():
    cfg = EnsembleConfig(paths=256, burn_in=0.0, horizon=10.0, sample_interval=0.1)
    rep = small_noise_experiment(cfg, SolverConfig(), NOISE, GRID, FLUX, zero_initial, quantile=0.1)
    assert rep.conditional_mean < rep.unconditional_mean
