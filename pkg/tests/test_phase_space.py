import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semiflow.errors import DomainError, NormalizationError, PreconditionError, StructuralError
from semiflow.phase_space import (Branch, MarkovMap, enumerate_words, inverse_branch, jacobian_J, make_map,
                                  make_roof, preimages, roof_sum_and_derivative, system_constants,
                                  verify_assumptions)


def test_doubling_constants_closed_form(doubling, const_roof):
    t0 = time.perf_counter()
    rep = verify_assumptions(doubling, const_roof)
    assert time.perf_counter() - t0 < 1.0
    c = rep.constants
    assert abs(c.lam - math.log(2)) < 1e-12 and abs(c.Lam - math.log(2)) < 1e-12
    assert c.C2 == 0 and c.C3 == 0
    assert rep.covering_index == 1 and rep.all_pass


def test_tripling_constants(tripling):
    rep = verify_assumptions(tripling, make_roof("constant", [1.0], tripling))
    assert abs(rep.constants.lam - math.log(3)) < 1e-12
    assert abs(rep.constants.Lam - math.log(3)) < 1e-12
    assert rep.all_pass


def test_perturbed_constants_match_dense_grid(perturbed, trig02):
    # oracle: |T'| = 2 + 0.1 pi cos(2 pi x) on 1e6 points
    x = np.linspace(0, 1, 1_000_001)
    dT = np.abs(2 + 0.05 * 2 * np.pi * np.cos(2 * np.pi * x))
    rep = verify_assumptions(perturbed, trig02)
    assert rep.constants.lam == pytest.approx(math.log(dT.min()), abs=1e-6)
    assert rep.constants.Lam == pytest.approx(math.log(dT.max()), abs=1e-6)
    assert rep.constants.lam > 0 and rep.all_pass


def test_non_markov_image_is_structural_error():
    fwd = lambda x: 2 * x
    jac = lambda x: np.full(x.shape[:-1] + (1, 1), 2.0)
    b0 = Branch([0.0], [0.5], fwd, jac)
    b1 = Branch([0.5], [1.0], lambda x: 1.5 * x - 0.5, lambda x: np.full(x.shape[:-1] + (1, 1), 1.5))
    with pytest.raises(StructuralError):
        MarkovMap([b0, b1]).transitions


def test_weak_expansion_asks_for_induced_iterate():
    # branch slope 1.5 on [0, 2/3) maps onto [0,1); second branch slope 3
    b0 = Branch([0.0], [2 / 3], lambda x: 1.5 * x, lambda x: np.full(x.shape[:-1] + (1, 1), 1.5))
    b1 = Branch([2 / 3], [1.0], lambda x: 3 * x - 2, lambda x: np.full(x.shape[:-1] + (1, 1), 3.0))
    tmap = MarkovMap([b0, b1])
    rep = verify_assumptions(tmap, make_roof("constant", [1.0], tmap))
    assert rep.all_pass
    # onto [0,1] but contracting near 0: T(x) = (x + x^2)/2, T'(0) = 1/2
    slow = MarkovMap([Branch([0.0], [1.0], lambda x: 0.5 * x + 0.5 * x ** 2,
                             lambda x: (0.5 + x)[..., None])])
    with pytest.raises(NormalizationError, match="induced"):
        verify_assumptions(slow, make_roof("constant", [1.0], slow))


def test_inverse_branch_examples(doubling, perturbed):
    assert inverse_branch(doubling, (0, 1), 0.5)[0] == pytest.approx(0.625, abs=1e-15)
    assert inverse_branch(doubling, (0, 0, 0), 0.0)[0] == 0.0
    x = inverse_branch(perturbed, (1,), 0.3)[0]
    assert abs((2 * x + 0.05 * np.sin(2 * np.pi * x)) % 1.0 - 0.3) < 1e-12


def test_inverse_branch_rejects_point_outside_image(doubling):
    with pytest.raises((DomainError, PreconditionError)):
        inverse_branch(doubling, (0,), 1.5)


@given(st.lists(st.integers(0, 1), min_size=1, max_size=6), st.floats(0.0, 0.999999))
@settings(max_examples=50, deadline=None)
def test_inverse_branch_round_trip(word, y):
    tmap = make_map("perturbed_doubling", [0.05])
    x = inverse_branch(tmap, tuple(word), y)
    z = x.copy()
    for _ in word:
        z = tmap.forward(z)
    gap = abs(z[0] - y)
    assert min(gap, 1 - gap) < 1e-10  # circle distance: 0 and 1 are the same point


def test_jacobian_doubling(doubling):
    J, Dl = jacobian_J(doubling, (1, 0, 1), 0.37)
    assert J == pytest.approx(1 / 8)
    total = sum(jacobian_J(doubling, w, 0.37)[0] for w in enumerate_words(doubling, 3))
    assert total == pytest.approx(1.0, abs=1e-14)


def test_roof_sum_identity_roof_geometric(doubling, identity_roof):
    for n in range(1, 8):
        _, D = roof_sum_and_derivative(doubling, identity_roof, (0,) * n, 0.4)
        assert float(np.ravel(D)[0]) == pytest.approx(sum(2.0 ** -k for k in range(1, n + 1)), abs=1e-13)
    assert system_constants(doubling, identity_roof).C5 == pytest.approx(2.0)


def test_roof_sum_constant_roof(perturbed):
    roof = make_roof("constant", [1.0], perturbed)
    tau, D = roof_sum_and_derivative(perturbed, roof, (0, 1, 1, 0), 0.2)
    assert tau == pytest.approx(4.0) and np.allclose(D, 0)


def test_roof_derivative_within_half_cone(perturbed):
    roof = make_roof("trig", [1.0, 0.1, 1], perturbed)
    C5 = system_constants(perturbed, roof).C5
    rng = np.random.default_rng(3)
    for _ in range(100):
        word = tuple(rng.integers(0, 2, 10))
        _, D = roof_sum_and_derivative(perturbed, roof, word, rng.random())
        assert abs(float(np.ravel(D)[0])) <= 0.5 * C5 * (1 + 1e-9)


def test_preimages_cover_all_words(perturbed, trig02):
    blk = preimages(perturbed, trig02, np.array([[0.3]]), 5)
    assert blk.words.shape == (32, 5)
    assert np.exp(blk.log_jac).sum() > 0


def test_product_map_is_markov():
    m = make_map("markov_2d_product", [0.0])
    rep = verify_assumptions(m, make_roof("constant", [1.0], m))
    assert m.d == 2 and rep.all_pass
