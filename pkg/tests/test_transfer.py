import time

import numpy as np
import pytest

from semiflow.errors import PreconditionError, ResourceError
from semiflow.holder import PiecewiseField
from semiflow.phase_space import make_roof
from semiflow.transfer import (InvariantDensityEstimator, apply_twisted, invariant_density, ly_constants,
                               ly_suite, norm_decay_scan, pairwise_cancellation, schedule, trig_probes)
from semiflow.phase_space import system_constants

from conftest import ulam_density


def test_constant_field_is_fixed(doubling, const_roof):
    one = PiecewiseField.constant(doubling, 1.0, resolution=65)
    for n in (1, 4, 9):
        assert np.max(np.abs(apply_twisted(doubling, const_roof, 0, n, one).values - 1)) < 1e-13


def test_constant_roof_twist_factors_out(doubling, const_roof):
    one = PiecewiseField.constant(doubling, 1.0, resolution=65)
    b = 3.7
    for n in (1, 5):
        out = apply_twisted(doubling, const_roof, 1j * b, n, one)
        assert np.max(np.abs(out.values - np.exp(-1j * b * n))) < 1e-12


def test_word_budget_is_enforced(doubling, const_roof):
    one = PiecewiseField.constant(doubling, 1.0, resolution=9)
    with pytest.raises(ResourceError, match="compos"):
        apply_twisted(doubling, const_roof, 0, 12, one, word_budget=1000)


@pytest.mark.parametrize("name", ["doubling", "tripling"])
def test_affine_density_is_one(name, request):
    tmap = request.getfixturevalue(name)
    h = invariant_density(tmap)
    assert np.max(np.abs(h.values - 1)) < 1e-10


def test_perturbed_density_matches_ulam(perturbed, ulam_1e6):
    bins, P = ulam_1e6
    t0 = time.perf_counter()
    h = invariant_density(perturbed)
    assert time.perf_counter() - t0 < 120
    c = (np.arange(bins) + 0.5) / bins
    assert np.mean(np.abs(np.real(h.evaluate(c[:, None])) - ulam_density(P))) < 1e-3


def test_transfer_power_matches_ulam(perturbed, ulam_1e6):
    bins, P = ulam_1e6
    roof = make_roof("constant", [1.0], perturbed)
    f = PiecewiseField.from_function(perturbed, lambda x: np.sin(2 * np.pi * x[..., 0]), resolution=1024)
    out = apply_twisted(perturbed, roof, 0, 10, f)
    c = (np.arange(bins) + 0.5) / bins
    v = (np.cos(2 * np.pi * (c - 0.5 / bins)) - np.cos(2 * np.pi * (c + 0.5 / bins))) * bins / (2 * np.pi)
    for _ in range(10):
        v = P @ v
    assert np.mean(np.abs(np.real(out.evaluate(c[:, None])) - v)) < 1e-3


def test_density_estimator_shape(perturbed):
    est = InvariantDensityEstimator(resolution=512).fit(perturbed)
    x = np.linspace(0, 0.99, 7)[:, None]
    assert est.predict(x).shape == (7,)
    assert est.density_.integral() == pytest.approx(1.0, abs=1e-10)


def test_ly_small_probe_set(doubling, const_roof):
    probes = [PiecewiseField.from_function(doubling, fn, resolution=257)
              for fn in (lambda x: 1 + 0 * x[..., 0], lambda x: x[..., 0], lambda x: np.sin(2 * np.pi * x[..., 0]))]
    rep = ly_constants(doubling, const_roof, 0, 5, probes)
    assert np.isfinite(rep.A) and rep.passed


def test_ly_constant_probe_has_zero_seminorm(doubling, const_roof):
    one = PiecewiseField.constant(doubling, 1.0, resolution=65)
    image = apply_twisted(doubling, const_roof, 20j, 4, one)
    assert image.seminorm(1.0) < 1e-12
    assert ly_constants(doubling, const_roof, 20j, 4, [one]).passed


def test_ly_perturbed_example(perturbed):
    roof = make_roof("trig", [1.0, 0.1, 1], perturbed)
    reps = ly_suite(perturbed, roof, [0.005 + 50j], [8], n_probes=20, resolution=256)
    assert all(r.passed for r in reps)


def test_ly_rejects_strong_negative_twist(doubling, const_roof):
    with pytest.raises(PreconditionError):
        ly_suite(doubling, const_roof, [-1.0], [1], n_probes=2, resolution=32)


def test_schedule_defaults(perturbed, trig02):
    c = system_constants(perturbed, trig02)
    s = schedule(c, 1.0)
    assert s["B"] == pytest.approx(4 * (2 / c.lam + 1 / (8 * c.Lam)))
    assert schedule(c, 1.0, B=2.0)["B"] == 2.0


def test_scan_identity_cell_and_constant_roof(doubling, const_roof):
    res = norm_decay_scan(doubling, const_roof, 0.0, [2 * np.pi], list(range(0, 9)), n_probes=4,
                          resolution=64, B=1.0)
    assert res.ratio[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert res.zeta[2 * np.pi] <= 1e-6
    assert "no_contraction" in res.flags[2 * np.pi]


def test_scan_is_seed_deterministic(perturbed, trig02):
    kw = dict(n_probes=4, resolution=64, B=1.0, seed=5)
    r1 = norm_decay_scan(perturbed, trig02, 0.0, [20.0], list(range(0, 6)), n_jobs=1, **kw)
    r2 = norm_decay_scan(perturbed, trig02, 0.0, [20.0], list(range(0, 6)), n_jobs=3, **kw)
    assert np.array_equal(r1.ratio, r2.ratio)


def test_pairwise_cancellation_decreases_with_frequency(perturbed, trig02):
    subtotals = [pairwise_cancellation(perturbed, trig02, b, 4, 4, resolution=1025).transversal_subtotal
                 for b in (30.0, 60.0, 120.0)]
    assert subtotals[0] > subtotals[1] > subtotals[2]


def test_pairwise_cancellation_trivial_cases(doubling, const_roof):
    t = pairwise_cancellation(doubling, const_roof, 60.0, 2, 2, resolution=257)
    assert t.nontransversal_mass == pytest.approx(t.total_mass) and t.transversal_sum_abs == 0
    z = pairwise_cancellation(doubling, const_roof, 60.0, 2, 2, f=lambda x: 0 * x, resolution=257)
    assert z.total_mass == 0 and all(np.all(I == 0) for I in z.integrals)


def test_trig_probes_are_real(perturbed):
    probes = trig_probes(perturbed, 5, band=3, resolution=64)
    assert len(probes) == 5
    assert all(np.allclose(np.imag(p.values), 0) for p in probes)
