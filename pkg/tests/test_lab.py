import numpy as np
import pytest
from scipy import stats

from semiflow.errors import ConfigError, FitError
from semiflow.holder import PiecewiseField
from semiflow.lab import (DecayRateFit, base_trig, constant_observable, fiber_fourier, fit_decay_rate,
                          flow_step, make_state, mc_correlation, sample_nu_tau, shifted)
from semiflow.phase_space import make_roof


@pytest.fixture(scope="module")
def cos_roof(doubling):
    return make_roof("trig", [1.0, 0.2, 1], doubling)


@pytest.fixture(scope="module")
def unit_density(doubling):
    return PiecewiseField.constant(doubling, 1.0, resolution=33)


def test_flow_unit_roof_is_base_map(doubling, const_roof):
    s = flow_step(doubling, const_roof, make_state(doubling, [0.3, 0.7], 0.0), 1.0)
    assert np.allclose(s.x[:, 0], [0.6, 0.4]) and np.allclose(s.u, 0.0)


def test_flow_zero_time_is_identity(perturbed, trig02):
    s0 = make_state(perturbed, [0.1, 0.5], [0.05, 0.7])
    s1 = flow_step(perturbed, trig02, s0, 0.0)
    assert np.array_equal(s0.x, s1.x) and np.array_equal(s0.u, s1.u)


def test_flow_semigroup(doubling, cos_roof):
    rng = np.random.default_rng(1)
    x = rng.random(1000)
    u = rng.random(1000) * cos_roof.value(x[:, None], doubling.element_of(x[:, None]))
    a, b = rng.random(1000) * 4, rng.random(1000) * 4
    for i in range(1000):
        s = make_state(doubling, [x[i]], u[i])
        one = flow_step(doubling, cos_roof, s, a[i] + b[i])
        two = flow_step(doubling, cos_roof, flow_step(doubling, cos_roof, s, a[i]), b[i])
        assert abs(one.x[0, 0] - two.x[0, 0]) < 1e-12 and abs(one.u[0] - two.u[0]) < 1e-12


def test_sampling_unit_roof_is_uniform(doubling, const_roof, unit_density):
    s = sample_nu_tau(doubling, const_roof, unit_density, 100_000, seed=3)
    assert stats.kstest(s.x[:, 0], "uniform").pvalue > 0.01
    assert stats.kstest(s.u, "uniform").pvalue > 0.01


def test_sampling_is_length_biased(doubling, cos_roof, unit_density):
    s = sample_nu_tau(doubling, cos_roof, unit_density, 200_000, seed=4)
    # density of x is tau(x) = 1 + 0.2 cos(2 pi x); E[cos 2 pi x] = 0.1
    assert np.mean(np.cos(2 * np.pi * s.x[:, 0])) == pytest.approx(0.1, abs=0.01)
    tau = cos_roof.value(s.x, doubling.element_of(s.x))
    assert np.all((s.u >= 0) & (s.u < tau))


def test_sampling_is_seeded_and_thread_independent(doubling, cos_roof, unit_density):
    a = sample_nu_tau(doubling, cos_roof, unit_density, 5000, seed=9, n_jobs=1)
    b = sample_nu_tau(doubling, cos_roof, unit_density, 5000, seed=9, n_jobs=4)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.u, b.u)


def test_sampling_rejects_low_acceptance(doubling, const_roof):
    spike = PiecewiseField.constant(doubling, 1.0, resolution=1025)
    vals = spike.values.copy()
    vals[0, 500] = 1e5
    with pytest.raises(ConfigError):
        sample_nu_tau(doubling, const_roof, spike.with_values(vals), 1000, seed=0)


def test_constant_observable_has_zero_correlation(perturbed, trig02):
    t = np.arange(0, 3.0, 0.5)
    c = mc_correlation(perturbed, trig02, constant_observable(), constant_observable(), t, 20_000, seed=1,
                       n_blocks=20)
    assert np.all(np.abs(c.C) <= 1e-12 + 3 * c.se)


def test_correlation_ignores_added_constants(perturbed, trig02):
    t = np.arange(0, 3.0, 0.5)
    f = base_trig(1)
    c1 = mc_correlation(perturbed, trig02, f, f, t, 20_000, seed=2, n_blocks=20)
    c2 = mc_correlation(perturbed, trig02, shifted(f, 5.0), shifted(f, -3.0), t, 20_000, seed=2, n_blocks=20)
    assert np.allclose(c1.C, c2.C, atol=1e-10)


def test_correlation_is_seeded_and_thread_independent(perturbed, trig02):
    t = np.arange(0, 2.0, 0.5)
    f = base_trig(1)
    c1 = mc_correlation(perturbed, trig02, f, f, t, 10_000, seed=5, n_blocks=10, n_jobs=1)
    c2 = mc_correlation(perturbed, trig02, f, f, t, 10_000, seed=5, n_blocks=10, n_jobs=4)
    assert c1.to_csv() == c2.to_csv()


def test_sample_is_stationary(perturbed, trig02):
    from semiflow.transfer import invariant_density
    h = invariant_density(perturbed, resolution=2048)
    s = sample_nu_tau(perturbed, trig02, h, 200_000, seed=6)
    moved = flow_step(perturbed, trig02, s, 2.3)
    for obs in (lambda st: np.cos(2 * np.pi * st.x[:, 0]), lambda st: st.u):
        a, b = obs(s), obs(moved)
        assert abs(a.mean() - b.mean()) < 4 * np.sqrt((a.var() + b.var()) / a.size)


def test_unit_roof_fiber_mode_does_not_decay(doubling, const_roof, unit_density):
    t = np.arange(0, 6.0, 1.0)
    c = mc_correlation(doubling, const_roof, fiber_fourier(1), fiber_fourier(-1), t, 20_000, seed=0,
                       density=unit_density, n_blocks=20)
    assert np.allclose(np.abs(c.C), abs(c.C[0]), atol=1e-12)


def test_fit_exact_exponential():
    t = np.arange(0, 10, 0.5)
    fit = fit_decay_rate(t, 0.5 * np.exp(-0.3 * t))
    assert fit.gamma == pytest.approx(0.3, abs=1e-12) and fit.intercept == pytest.approx(np.log(0.5))


def test_fit_noisy_exponential():
    rng = np.random.default_rng(0)
    t = np.arange(0, 10, 0.25)
    C = 0.5 * np.exp(-0.3 * t) * (1 + 0.01 * rng.standard_normal(t.size))
    fit = fit_decay_rate(t, C, 0.01 * np.abs(C))
    assert fit.gamma == pytest.approx(0.3, abs=0.05)


def test_fit_flat_curve():
    t = np.arange(0, 10, 0.5)
    fit = fit_decay_rate(t, np.full(t.size, 0.2))
    assert fit.gamma == 0.0 and "no decay" in fit.flags


def test_fit_noise_floor():
    t = np.arange(0, 5, 0.5)
    with pytest.raises(FitError, match="noise floor"):
        fit_decay_rate(t, np.full(t.size, 1e-3), np.full(t.size, 1.0))


def test_fit_estimator_api():
    t = np.arange(0, 10, 0.5)
    est = DecayRateFit().fit(t, 2.0 * np.exp(-0.4 * t))
    assert est.gamma_ == pytest.approx(0.4)
    assert np.allclose(est.predict([0.0, 1.0]), [2.0, 2.0 * np.exp(-0.4)])
