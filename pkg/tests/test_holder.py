import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semiflow.errors import PreconditionError
from semiflow.holder import (PiecewiseField, b_norm, bump, holder_seminorm, holder_seminorm_allpairs, mollify,
                             oscillatory_integral, random_oscint_cases)
from semiflow.transfer import sup_interpolation_check, sup_interpolation_constant

UNIT = (0.0, 1.0)


def field(fn, resolution=4097, alpha=1.0, boxes=UNIT):
    return PiecewiseField.from_function(boxes, lambda x: fn(x[..., 0]), resolution=resolution, alpha=alpha)


def test_constant_has_zero_seminorm(doubling):
    f = PiecewiseField.constant(doubling, 3.0, resolution=65)
    assert holder_seminorm(f, 0.5) == 0.0


def test_identity_seminorm_is_one():
    assert holder_seminorm(field(lambda x: x), 1.0) == pytest.approx(1.0, abs=1e-12)


def test_sqrt_seminorm_matches_allpairs_oracle():
    f = field(np.sqrt, alpha=0.5)
    assert holder_seminorm(f, 0.5) == pytest.approx(1.0, rel=0.02)
    x = np.linspace(0, 1, 256)
    assert holder_seminorm_allpairs(np.sqrt(x), x, 0.5) == pytest.approx(1.0, rel=0.02)


@given(st.floats(0.1, 1.0), st.integers(1, 5), st.floats(0, 6.28))
@settings(max_examples=30, deadline=None)
def test_dyadic_seminorm_never_exceeds_allpairs(alpha, k, ph):
    x = np.linspace(0, 1, 257)
    f = field(lambda t: np.sin(2 * np.pi * k * t + ph), resolution=257, alpha=alpha)
    dyadic = holder_seminorm(f, alpha)
    exact = holder_seminorm_allpairs(np.sin(2 * np.pi * k * x + ph), x, alpha)
    assert dyadic <= exact * (1 + 1e-12)
    # binary decomposition of any gap into dyadic steps gives exact <= dyadic / (1 - 2^-alpha)
    assert dyadic >= exact * (1 - 2 ** -alpha) - 1e-12


def test_b_norm_examples(doubling):
    assert b_norm(PiecewiseField.constant(doubling, 1.0, resolution=33), 1.0, 7.0) == pytest.approx(1.0)
    f = field(lambda x: x)
    assert b_norm(f, 1.0, 0.0) == pytest.approx(3.0)
    assert b_norm(f, 1.0, 9.0) == pytest.approx(2.1)


def test_bump_is_normalized():
    z = np.linspace(-1, 1, 200001)
    assert np.trapezoid(bump(z), z) == pytest.approx(1.0, abs=1e-9)


def test_mollify_constant_is_exact():
    r = mollify(field(lambda x: 1 + 0 * x), field(lambda x: 1 + 0 * x), 50.0)
    assert r.sup_error < 1e-13 and r.sup_derivative < 1e-10 and r.ok


def test_mollify_linear_against_direct_quadrature():
    b = 100.0
    r = mollify(field(lambda x: x), field(lambda x: 1 + 0 * x), b)
    assert r.sup_error <= 0.01 and r.ok
    # oracle: direct trapezoid convolution of the constant-extended quotient at 1e4 points
    xs = np.linspace(0, 1, 10_000)
    z = np.linspace(-1 / b, 1 / b, 4001)
    w = b * bump(b * z)
    oracle = np.trapezoid(w[None] * np.clip(xs[:, None] - z[None], 0, 1), z, axis=1)
    got = np.real(r.g.evaluate(xs[:, None], 0))
    assert np.max(np.abs(got - oracle)) < 1e-5


def test_mollify_holder_half():
    k = field(lambda x: np.abs(x - 0.5) ** 0.5, alpha=0.5)
    r = mollify(k, field(lambda x: 1 + 0 * x, alpha=0.5), 16.0, alpha=0.5)
    assert r.seminorm == pytest.approx(holder_seminorm(k, 0.5))
    assert r.ok


def test_mollify_rejects_vanishing_derivative():
    with pytest.raises(PreconditionError):
        mollify(field(lambda x: x), field(lambda x: x - 0.5), 10.0)


def test_oscint_closed_form():
    r = oscillatory_integral(1.0, lambda x: x, 1.0, 100.0)
    exact = (np.exp(100j) - 1) / 100j
    assert abs(r.value - exact) < 1e-12
    assert abs(r.value) <= 0.02 and r.bound == pytest.approx(7 / 100) and r.bound_satisfied


@pytest.mark.parametrize("m", [1, 3, 10])
def test_oscint_full_periods_vanish(m):
    assert abs(oscillatory_integral(1.0, lambda x: x, 1.0, 2 * np.pi * m).value) < 1e-12


def test_oscint_against_simpson_oracle():
    r = oscillatory_integral(lambda x: x, lambda x: x + x ** 2 / 4, lambda x: 1 + x / 2, 50.0)
    x = np.linspace(0, 1, 1_000_001)
    y = x * np.exp(50j * (x + x ** 2 / 4))
    w = np.ones_like(x)
    w[1:-1:2], w[2:-1:2] = 4, 2
    oracle = np.sum(w * y) * (x[1] - x[0]) / 3
    assert abs(r.value - oracle) < 1e-8
    assert r.kappa == pytest.approx(1.0) and r.bound_satisfied


def test_oscint_random_cases_respect_bound():
    for case in random_oscint_cases(25, seed=11):
        r = oscillatory_integral(case["k"], case["theta"], case["dtheta"], case["b"])
        assert r.bound_satisfied
        assert r.kappa == pytest.approx(case["kappa"], rel=1e-3)


def test_oscint_bound_can_fail_for_large_kappa():
    # theta' = 10: the integral decays like 1/(kappa b) while the bound scales like (kappa+6)/kappa^2/b,
    # so the bound is smaller than the true value at b just above 2
    r = oscillatory_integral(1.0, lambda x: 10 * x, 10.0, 2.2)
    assert abs(r.value) == pytest.approx(abs((np.exp(22j) - 1) / 22j), abs=1e-12)
    assert not r.bound_satisfied


def test_sup_interpolation_examples(doubling):
    one = PiecewiseField.constant(doubling, 1.0, resolution=65)
    for eps in (0.01, 0.1, 0.4):
        assert sup_interpolation_check(one, eps).holds
    s = PiecewiseField.from_function(doubling, lambda x: np.sin(2 * np.pi * x[..., 0]), resolution=1025)
    chk = sup_interpolation_check(s, 0.1)
    assert chk.holds and chk.C == 2.0
    vals = np.zeros_like(s.values)
    vals[0, 100] = 1.0
    assert sup_interpolation_check(s.with_values(vals), 0.1).holds
    assert sup_interpolation_constant(2) == pytest.approx(8.0)


def test_csv_round_trip(doubling):
    f = PiecewiseField.from_function(doubling, lambda x: np.cos(3 * x[..., 0]), resolution=17)
    g = PiecewiseField.from_csv(doubling, f.to_csv())
    assert np.array_equal(np.real(g.values), np.real(f.values))
