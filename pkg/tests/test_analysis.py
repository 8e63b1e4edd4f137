import numpy as np
import pytest

from fraclab.analysis import (blowdown, constrained_minimality_test, fit_1d, g_balance, glue_competitors,
                              harmonic_test_field, make_stability_form, random_glue_perturbation,
                              random_test_fields, rescaling_instability_test, shift_with_tail, sliding_verify,
                              stability_form_eval, stability_parts, translation_mode)
from fraclab.energy import standard_bump
from fraclab.extension import extend
from fraclab.fracop import ContractError, GridFunction, TailModel
from fraclab.model import make_polynomial_nonlinearity
from fraclab.solver import rotated_layer_data, solve_layer, solve_monotone_2d, tensor_layer_data


@pytest.fixture(scope="module")
def form05(layer05, cubic):
    return make_stability_form(layer05.grid, 0.5, cubic, R=16.0, zmesh=24)


def _trace(u, vals):
    return GridFunction(vals, u.spacing, u.origin, TailModel.constant(0.0))


# --------------------------------------------------------------------------
# stability form


def test_stability_form_is_a_quadratic_form(form05, layer05):
    u = layer05.grid
    x = u.axis_coords(0)
    a = harmonic_test_field(_trace(u, standard_bump([x], center=1.0, radius=2.0)), 0.5, 16.0, 24)
    b = harmonic_test_field(_trace(u, standard_bump([x], center=-1.5, radius=1.5)), 0.5, 16.0, 24)
    Q = lambda f: stability_form_eval(form05, f)
    qa, qb = Q(a), Q(b)
    assert Q(a.like(2.5 * a.nodal)) == pytest.approx(6.25 * qa, rel=1e-12)
    plus, minus = Q(a.like(a.nodal + b.nodal)), Q(a.like(a.nodal - b.nodal))
    assert plus + minus == pytest.approx(2 * qa + 2 * qb, rel=1e-10)
    assert Q(a.like(np.zeros_like(a.nodal))) == 0.0


def test_stability_form_rejects_bad_support(form05, layer05):
    u = layer05.grid
    x = u.axis_coords(0)
    a = harmonic_test_field(_trace(u, standard_bump([x], radius=2.0)), 0.5, 16.0, 24)
    bad = a.nodal.copy()
    bad[..., -1] = 1.0
    with pytest.raises(ContractError):
        stability_form_eval(form05, a.like(bad))
    with pytest.raises(ContractError):
        harmonic_test_field(_trace(u, np.ones_like(x)), 0.5, 16.0, 24)


def test_layer_is_stable_and_translation_is_null(form05, layer05):
    zetas = random_test_fields(form05, 16.0, 8, seed=3, zmesh=24)
    for z in zetas:
        kin, pot, norm = stability_parts(form05, z)
        assert kin + pot >= -1e-2 * norm
    mode = harmonic_test_field(translation_mode(layer05.grid, 16.0), 0.5, 16.0, 24)
    kin, pot, norm = stability_parts(form05, mode)
    assert abs(kin + pot) <= 1e-2 * norm


def test_rescaling_drives_the_zero_state_unstable(cubic):
    tab = rescaling_instability_test(0.25, eps_list=(1.0, 0.5, 0.2, 0.1, 0.05), nl=cubic, h=0.1, M=100)
    assert tab.expected == (-0.5, -1.0)
    assert tab.exponents[0] == pytest.approx(-0.5, abs=0.05)
    assert tab.exponents[1] == pytest.approx(-1.0, abs=0.01)
    forms = [r[1] for r in tab.rows]
    assert forms[-1] < 0 and forms[-1] < forms[0]
    assert tab.csv().columns == ("eps", "form", "kinetic", "potential")


# --------------------------------------------------------------------------
# G-balance


def test_g_balance(cubic):
    assert g_balance(cubic, "plus") == pytest.approx(0.25, rel=1e-12)
    assert g_balance(cubic, "minus") == pytest.approx(-0.25, rel=1e-12)
    # f = t/2 - t^3 integrates to zero over [0, 1]
    tilted = make_polynomial_nonlinearity([0.0, 0.5, 0.0, -1.0])
    assert g_balance(tilted, "plus") == pytest.approx(0.0, abs=1e-14)
    with pytest.raises(ValueError):
        g_balance(cubic, "both")


# --------------------------------------------------------------------------
# sliding


def test_shift_with_tail_uses_the_far_field(layer05):
    u = layer05.grid
    w = shift_with_tail(u, 100.0, 0)
    np.testing.assert_allclose(w, 1.0)
    np.testing.assert_allclose(shift_with_tail(u, 0.0, 0), u.values)
    half = shift_with_tail(u, 0.05, 0)
    np.testing.assert_allclose(half[:-1], 0.5 * (u.values[:-1] + u.values[1:]))


def test_sliding_against_itself(layer05):
    u = layer05.grid
    rep = sliding_verify(u, u, np.linspace(0, 2, 21), axis=0)
    assert rep.k_star == 0.0
    assert all(r[2] for r in rep.rows if r[0] > 0)


def test_sliding_against_a_bump_scales_with_height(layer05):
    u = layer05.grid
    x = u.axis_coords(0)
    ks = np.linspace(0, 1, 201)
    stars = []
    for height in (0.01, 0.02, 0.04):
        w_o = u.with_values(u.values + height * standard_bump([x], radius=1.0))
        rep = sliding_verify(u, w_o, ks, axis=0)
        assert rep.dominated and rep.k_bar is not None
        stars.append(rep.k_star)
    assert 0 < stars[0] < stars[1] < stars[2]
    assert stars[2] / stars[0] == pytest.approx(4.0, rel=0.3)


def test_sliding_without_domination(layer05):
    u = layer05.grid
    w_o = u.with_values(np.ones(u.shape), TailModel.constant(1.0))
    rep = sliding_verify(u, w_o, np.linspace(0, 2, 11), R=4.0, axis=0)
    assert not rep.dominated and np.isnan(rep.k_star)
    assert "no domination" in rep.message
    with pytest.raises(ContractError):
        sliding_verify(u, GridFunction(np.zeros(5), 0.1, (0.0,), TailModel.constant(0.0)), [0.0])


# --------------------------------------------------------------------------
# constrained minimality


@pytest.fixture(scope="module")
def tensor2d(cubic):
    lay = solve_layer(cubic, 0.5, 16.0, 129, tol=1e-10)
    return solve_monotone_2d(cubic, 0.5, (6, 16), tensor_layer_data(lay), tol=1e-11, h=0.25, frame=8)


def test_constrained_minimality_on_tensor_layer(cubic, tensor2d):
    u = tensor2d
    bad = np.zeros(u.shape)
    bad[u.shape[0] // 2, -10] = 1.0  # pushes u above +1
    rep = constrained_minimality_test(u, -1.0, 1.0, 0.5, 5.0, trials=12, nl=cubic, seed=1,
                                      extra=(np.zeros(u.shape), bad))
    assert rep.trials == 12
    assert rep.rejected >= 1 and any("excluded" in m for m in rep.log)
    zero_row = [r for r in rep.rows if r[0] == -1]
    assert zero_row and zero_row[0][3] == 0.0
    assert rep.min_difference >= -1e-8 and rep.passed


def test_constrained_minimality_with_no_room(cubic, tensor2d):
    rep = constrained_minimality_test(tensor2d, 1.0, 1.0, 0.5, 5.0, trials=3, nl=cubic)
    assert rep.trials == 0 and not rep.passed
    assert any("no admissible" in m for m in rep.log)


# --------------------------------------------------------------------------
# gluing


@pytest.fixture(scope="module")
def glue_fields(layer05):
    u = layer05.grid
    E = extend(u, 0.5, 4.0, 16)
    lo = extend(u.with_values(-np.ones(u.shape), TailModel.constant(-1.0)), 0.5, 4.0, 16)
    hi = extend(u.with_values(np.ones(u.shape), TailModel.constant(1.0)), 0.5, 4.0, 16)
    return E, lo, hi


def test_glue_with_zero_perturbation(cubic, glue_fields):
    E, lo, hi = glue_fields
    g = glue_competitors(E, np.zeros_like(E.nodal), lo, hi, 1.0, cubic)
    assert g.passed
    for row in g.ledger:
        assert row[4] == pytest.approx(0.0, abs=1e-12)
    assert not g.regions["region1"].any() and not g.regions["region2"].any()
    np.testing.assert_allclose(g.beta.nodal, E.nodal)


def test_glue_with_large_perturbation(cubic, glue_fields, rng):
    E, lo, hi = glue_fields
    for _ in range(5):
        Psi = random_glue_perturbation(E, rng, amplitude=3.0)
        g = glue_competitors(E, Psi, lo, hi, 1.0, cubic)
        assert g.passed
        assert np.all(g.alpha.nodal >= hi.nodal) and np.all(g.gamma.nodal <= lo.nodal)
    Psi = 3.0 * np.abs(random_glue_perturbation(E, rng, amplitude=1.0))
    g = glue_competitors(E, Psi, lo, hi, 1.0, cubic)
    assert g.regions["region1"].any()


def test_glue_errors(cubic, glue_fields):
    E, lo, hi = glue_fields
    with pytest.raises(ValueError):
        glue_competitors(E, np.zeros_like(E.nodal), hi, lo, 1.0, cubic)
    bad = np.zeros_like(E.nodal)
    bad[..., -1] = 1.0
    with pytest.raises(ContractError):
        glue_competitors(E, bad, lo, hi, 1.0, cubic)


# --------------------------------------------------------------------------
# blow-down and 1D fits


def test_blowdown_of_constant_is_flat():
    x = np.linspace(-5, 5, 51)
    X = np.meshgrid(x, x, indexing="ij")
    u = GridFunction(np.ones_like(X[0]), x[1] - x[0], (x[0], x[0]), TailModel.constant(1.0))
    tab = blowdown(u, (1.0, 0.1), samples=41)
    np.testing.assert_allclose(tab.distances, 0.0, atol=1e-14)


def test_blowdown_of_layer_converges(layer05):
    tab = blowdown(layer05.grid, (1.0, 0.5, 0.25, 0.125, 0.0625))
    d = tab.distances
    assert np.all(np.diff(d) < 0)
    assert all(float(o[0]) == 1.0 for o in tab.omega)
    # the best offset is the zero of the layer
    assert abs(tab.rows[-1][3]) < 0.02


def test_blowdown_angle_of_rotated_layer(layer05):
    g = rotated_layer_data(layer05, 10.0).tabulate((12, 12), 0.2)
    tab = blowdown(g, (0.5, 0.25), samples=101)
    for row in tab.rows:
        assert row[2] == pytest.approx(80.0, abs=1.0)


def _rotated(theta_deg, L=6.0, h=0.1):
    x = np.arange(-round(L / h), round(L / h) + 1) * h
    X1, X2 = np.meshgrid(x, x, indexing="ij")
    t = np.deg2rad(theta_deg)
    return GridFunction(np.tanh(np.cos(t) * X1 + np.sin(t) * X2), h, (x[0], x[0]), TailModel.edge())


@pytest.mark.parametrize("theta", [20.0, 63.5, 90.0])
def test_fit_1d_recovers_direction(theta):
    fit = fit_1d(_rotated(theta))
    assert min(abs(fit.angle_deg - theta), abs(fit.angle_deg - theta - 180)) <= 0.5
    assert fit.residual < 0.02
    assert abs(np.linalg.norm(fit.omega) - 1) < 1e-12


def test_fit_1d_of_saddle_is_poor():
    x = np.arange(-60, 61) * 0.1
    X1, X2 = np.meshgrid(x, x, indexing="ij")
    u = GridFunction(np.tanh(X1) * np.tanh(X2), 0.1, (x[0], x[0]), TailModel.edge())
    assert fit_1d(u).residual > 0.1
    with pytest.raises(ContractError):
        fit_1d(GridFunction(x, 0.1, (x[0],), TailModel.edge()))
