import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special

from fraclab.fracop import (ContractError, GridFunction, TailModel, TruncationBudgetError, apply_frac_laplacian,
                            frac_constant, frac_laplacian, frac_laplacian_spectral, pad_with_tail)


def periodic_grid(vals_fn, N=128, L=2 * np.pi, n=1):
    h = L / N
    x = np.arange(N) * h
    X = np.meshgrid(*([x] * n), indexing="ij")
    return GridFunction(vals_fn(*X), h, (0.0,) * n, TailModel.periodic())


def test_constant_oracle_values():
    assert frac_constant(1, 0.5).value == pytest.approx(1 / (2 * np.pi), rel=1e-14)
    assert frac_constant(2, 0.5).value == pytest.approx(1 / (4 * np.pi), rel=1e-14)
    # direct Gamma evaluation
    for n, s in [(1, 0.25), (2, 0.75), (3, 0.3)]:
        ref = 2 ** (2 * s - 1) * s * special.gamma(n / 2 + s) / (np.pi ** (n / 2) * special.gamma(1 - s))
        assert frac_constant(n, s).value == pytest.approx(ref, rel=1e-13)


def test_constant_vanishes_as_s_to_zero():
    assert frac_constant(2, 1e-8).value < 1e-7


@pytest.mark.parametrize("s", [0.0, 1.0, -0.2, 1.5])
def test_constant_domain(s):
    with pytest.raises(ValueError):
        frac_constant(1, s)


def test_constant_function_gives_zero():
    x = np.linspace(-5, 5, 41)
    u = GridFunction(np.full(41, 0.7), x[1] - x[0], (x[0],), TailModel.constant(0.7))
    assert frac_laplacian(u, 0.4, [0.3]) == pytest.approx(0.0, abs=1e-12)
    assert np.max(np.abs(apply_frac_laplacian(u, 0.4).values)) < 1e-12
    u2 = GridFunction(np.full((21, 21), 0.7), 0.5, (-5.0, -5.0), TailModel.constant(0.7))
    assert np.max(np.abs(apply_frac_laplacian(u2, 0.6).values)) < 1e-12
    u3 = GridFunction(np.full((15, 15, 15), 0.7), 0.5, (-3.5,) * 3, TailModel.constant(0.7))
    assert frac_laplacian(u3, 0.5, [0.0, 0.0, 0.0]) == pytest.approx(0.0, abs=1e-11)


@pytest.mark.parametrize("s", [0.25, 0.5, 0.75])
def test_cosine_pointwise(s):
    u = periodic_grid(lambda x: np.cos(2 * x), N=256)
    for x0 in (0.0, 0.4, 1.3):
        exact = 2 ** (2 * s) * np.cos(2 * x0)
        got = frac_laplacian(u, s, [x0])
        assert abs(got - exact) <= 0.02 * 2 ** (2 * s)


def test_spectral_examples():
    u = periodic_grid(lambda x: np.cos(2 * x))
    np.testing.assert_allclose(frac_laplacian_spectral(u, 0.5).values, 2 * np.cos(2 * u.axis_coords(0)), atol=1e-12)
    c = periodic_grid(lambda x: 0 * x + 3.0)
    assert np.max(np.abs(frac_laplacian_spectral(c, 0.3).values)) < 1e-12


def test_spectral_parity():
    N = 128
    u = periodic_grid(lambda x: np.exp(np.cos(x)), N=N)
    out = frac_laplacian_spectral(u, 0.35).values
    neg = (-np.arange(N)) % N
    np.testing.assert_allclose(out[neg], out, atol=1e-12)


def test_spectral_contract_errors():
    x = np.linspace(0, 1, 64)
    with pytest.raises(ContractError):
        frac_laplacian_spectral(GridFunction(x, x[1], (0.0,), TailModel.constant(0.0)), 0.5)
    with pytest.raises(ContractError):
        frac_laplacian_spectral(GridFunction(np.zeros(100), 0.1, (0.0,), TailModel.periodic()), 0.5)


def test_quadrature_vs_spectral_2d():
    u = periodic_grid(lambda x, y: np.cos(x + 2 * y), N=64, n=2)
    q = apply_frac_laplacian(u, 0.5).values
    sp = frac_laplacian_spectral(u, 0.5).values
    assert np.max(np.abs(q - sp)) / np.max(np.abs(sp)) < 0.02


def test_linearity(rng):
    N = 161
    x = np.linspace(-8, 8, N)
    h = x[1] - x[0]
    tail = TailModel.constant(0.0)
    u = GridFunction(np.exp(-x ** 2), h, (x[0],), tail)
    v = GridFunction(np.exp(-(x - 1) ** 2) * np.sin(x), h, (x[0],), tail)
    w = u.with_values(2.5 * u.values - 1.5 * v.values)
    for xi in rng.uniform(-3, 3, 20):
        a, b, c = (frac_laplacian(g, 0.4, [xi]) for g in (u, v, w))
        assert c == pytest.approx(2.5 * a - 1.5 * b, rel=1e-8, abs=1e-12)


def test_translation_equivariance_periodic():
    u = periodic_grid(lambda x: np.exp(np.sin(x)) + 0.1 * np.cos(3 * x), N=64)
    v = u.with_values(np.roll(u.values, 1))
    assert frac_laplacian(v, 0.6, [v.axis_coords(0)[11]]) == frac_laplacian(u, 0.6, [u.axis_coords(0)[10]])
    np.testing.assert_allclose(apply_frac_laplacian(v, 0.6).values, np.roll(apply_frac_laplacian(u, 0.6).values, 1),
                               atol=1e-12)


def test_positive_at_strict_maximum():
    x = np.linspace(-6, 6, 121)
    u = GridFunction(1 / (1 + x ** 2), x[1] - x[0], (x[0],), TailModel.constant(0.0))
    for s in (0.2, 0.5, 0.8):
        assert frac_laplacian(u, s, [0.0]) > 0


def test_layer_residual(layer05, cubic):
    for x0 in (-3.0, 0.0, 1.7, 10.0):
        got = frac_laplacian(layer05.grid, 0.5, [x0])
        assert got == pytest.approx(float(cubic.f(layer05(x0))), abs=1e-4)


def test_pointwise_matches_grid_sweep_2d():
    h = 0.25
    x = np.arange(-24, 25) * h
    X1, X2 = np.meshgrid(x, x, indexing="ij")
    vals = np.tanh(X2 + 0.3 * np.sin(X1))
    for tail in (TailModel.constant_pm1(axis=1), TailModel.edge()):
        u = GridFunction(vals, h, (x[0], x[0]), tail)
        sweep = apply_frac_laplacian(u, 0.5).values
        for i, j in [(24, 24), (10, 30), (30, 12)]:
            assert frac_laplacian(u, 0.5, [x[i], x[j]], budget=1.0) == pytest.approx(sweep[i, j], abs=1e-12)


def test_off_node_interpolates():
    x = np.linspace(-10, 10, 401)
    u = GridFunction(np.exp(-x ** 2 / 4), x[1] - x[0], (x[0],), TailModel.constant(0.0))
    a = frac_laplacian(u, 0.5, [0.5])
    b = frac_laplacian(u, 0.5, [0.525])
    c = frac_laplacian(u, 0.5, [0.55])
    assert min(a, c) - 1e-6 <= b <= max(a, c) + 1e-6


def test_boundary_errors():
    x = np.linspace(-5, 5, 101)
    # face values far from +-1: the truncated tail is over budget near the face
    u = GridFunction(np.tanh(x / 4), x[1] - x[0], (x[0],), TailModel.constant_pm1(axis=0))
    with pytest.raises(TruncationBudgetError):
        frac_laplacian(u, 0.3, [4.6])
    with pytest.raises(ContractError):
        frac_laplacian(u, 0.3, [5.0])
    with pytest.raises(ContractError):
        frac_laplacian(u, 0.3, [0.0, 1.0])


def test_whole_grid_rejects_3d():
    u = GridFunction(np.zeros((5, 5, 5)), 1.0, (0.0,) * 3, TailModel.constant(0.0))
    with pytest.raises(ContractError):
        apply_frac_laplacian(u, 0.5)


def test_pad_modes():
    v = np.array([[1.0, 2.0], [3.0, 4.0]])
    p = pad_with_tail(v, TailModel.constant_pm1(axis=1), 1)
    np.testing.assert_array_equal(p[:, 0], -1.0)
    np.testing.assert_array_equal(p[:, -1], 1.0)
    np.testing.assert_array_equal(p[0, 1:3], [1.0, 2.0])
    np.testing.assert_array_equal(pad_with_tail(v, TailModel.edge(), 1)[0, 0], 1.0)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(-2.0, 2.0))
def test_constant_shift_invariance(s, c):
    x = np.linspace(-4, 4, 33)
    base = np.exp(-x ** 2)
    u = GridFunction(base, x[1] - x[0], (x[0],), TailModel.constant(0.0))
    v = GridFunction(base + c, x[1] - x[0], (x[0],), TailModel.constant(c))
    np.testing.assert_allclose(apply_frac_laplacian(v, s).values, apply_frac_laplacian(u, s).values, atol=1e-10)
