import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fraclab.model import (make_polynomial_nonlinearity, make_potential, nonlinearity_from_name, potential,
                           validate_bistable)


def test_cubic_values(cubic):
    assert cubic.f(1.0) == 0.0
    assert cubic.f(-1.0) == 0.0
    assert cubic.f(0.5) == pytest.approx(0.375, abs=1e-15)
    assert cubic.f_prime(0.0) == 1.0
    assert cubic.holder_alpha == 1.0


def test_cubic_end_zones(cubic):
    # f' = 1 - 3t^2 is below -c_kappa on both end zones
    t = np.concatenate([np.linspace(-1, -1 + cubic.kappa, 200), np.linspace(1 - cubic.kappa, 1, 200)])
    assert cubic.c_kappa > 0
    assert np.all(cubic.f_prime(t) < -cubic.c_kappa + 1e-9)
    # with kappa = 0.3 the worst point is |t| = 0.7: 3 * 0.49 - 1
    assert cubic.c_kappa == pytest.approx(0.47, abs=1e-6)


@pytest.mark.parametrize("t, expected", [(-1.0, 0.0), (0.0, 0.25), (1.0, 0.0), (0.5, (1 - 0.25) ** 2 / 4)])
def test_potential_closed_form(cubic, t, expected):
    assert potential(cubic, t) == pytest.approx(expected, abs=1e-13)


@settings(max_examples=100, deadline=None)
@given(st.floats(-1.2, 1.2))
def test_potential_derivative_is_minus_f(t):
    nl = nonlinearity_from_name("cubic")
    F = make_potential(nl)
    d = 1e-5
    assert (F(t + d) - F(t - d)) / (2 * d) == pytest.approx(-nl.f(t), abs=1e-6)


def test_potential_nonnegative_on_interval(cubic):
    t = np.linspace(-1, 1, 1001)
    assert np.all(make_potential(cubic)(t) >= 0)


def test_validate_cubic_passes(cubic):
    rep = validate_bistable(cubic, 0.25)
    assert rep.passed
    assert rep.integrals["int_0^1 f"] == pytest.approx(0.25, abs=1e-12)
    assert rep.integrals["int_-1^0 f"] == pytest.approx(-0.25, abs=1e-12)


def test_validate_flipped_sign_fails_end_zones():
    flipped = make_polynomial_nonlinearity([0.0, -1.0, 0.0, 1.0])
    rep = validate_bistable(flipped, 0.5)
    assert not rep.passed
    assert not rep.checks["end_zones"]


def test_validate_balanced_fails_sign_condition():
    # f = (t - t^3)(t^2 - c) with int_0^1 f = 0 needs c = 1/3: both integrals vanish
    nl = make_polynomial_nonlinearity(np.polynomial.polynomial.polymul([0, 1, 0, -1], [-1 / 3, 0, 1]))
    rep = validate_bistable(nl, 0.5)
    assert not rep.checks["sign_condition"]


def test_unknown_name():
    with pytest.raises(ValueError):
        nonlinearity_from_name("quintic")


def test_validate_domain(cubic):
    with pytest.raises(ValueError):
        validate_bistable(cubic, 1.0)
