"""Acceptance battery: one test per criterion, each printing a PASS/FAIL line."""

import json
from pathlib import Path

import numpy as np
import pytest

from fraclab import analysis, energy
from fraclab.cli import main, saddle_field
from fraclab.extension import extend, make_poisson_kernel, poisson_eval, poisson_mass, weighted_dirichlet
from fraclab.fracop import GridFunction, TailModel, apply_frac_laplacian, frac_laplacian_spectral
from fraclab.solver import (limit_trichotomy, rotated_layer_data, solve_layer, solve_monotone_2d,
                            tensor_layer_data, two_profile_data)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture
def verdict(capsys):
    def emit(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail
    return emit


@pytest.fixture(scope="module")
def tensor_solution(cubic):
    lay = solve_layer(cubic, 0.5, 16.0, 129, tol=1e-10)
    return solve_monotone_2d(cubic, 0.5, (12, 16), tensor_layer_data(lay), tol=1e-11, h=0.25, frame=8)


def test_criterion_01_operator_consistency(verdict):
    N = 512
    h = 2 * np.pi / N
    x = np.arange(N) * h
    worst = 0.0
    for s in (0.25, 0.5, 0.75):
        for k in (1, 2, 4):
            u = GridFunction(np.cos(k * x), h, (0.0,), TailModel.periodic())
            quad = apply_frac_laplacian(u, s).values
            spec = frac_laplacian_spectral(u, s).values
            worst = max(worst, float(np.max(np.abs(quad - spec)) / np.max(np.abs(spec))))
    verdict(1, worst <= 0.02, f"max relative error {worst:.2e} (<= 2e-2)")


def test_criterion_02_poisson_kernel(verdict):
    masses = []
    hom = 0.0
    rng = np.random.default_rng(2)
    for n in (1, 2):
        for s in (0.25, 0.5, 0.75):
            k = make_poisson_kernel(n, s)
            masses += [poisson_mass(k, z) for z in (0.1, 1.0, 10.0)]
            for _ in range(20):
                x, z, lam = rng.normal(size=n), rng.uniform(0.05, 5), rng.uniform(0.1, 10)
                p = poisson_eval(k, x, z)
                hom = max(hom, abs(poisson_eval(k, lam * x, lam * z) - lam ** -n * p) / p)
    ok = all(0.995 <= m <= 1.005 for m in masses) and hom <= 1e-12
    verdict(2, ok, f"masses in [{min(masses):.6f}, {max(masses):.6f}], homogeneity error {hom:.1e}")


def test_criterion_03_energy_compatibility(verdict):
    h, R, s = 0.05, 16.0, 0.5
    N = int(round(R / h))
    x = np.arange(-N, N + 1) * h
    zero = GridFunction(np.zeros_like(x), h, (x[0],), TailModel.constant(0.0))
    ratios = []
    for center, radius, amp in ((0.0, 1.0, 1.0), (0.7, 1.5, -0.4), (-2.0, 2.0, 2.0), (3.0, 2.5, 1.0),
                                (-1.0, 3.0, 0.3)):
        phi = zero.with_values(energy.standard_bump([x], center=center, radius=radius, amplitude=amp))
        g = energy.gagliardo_difference(zero, phi, s).value
        ratios.append(g / weighted_dirichlet(extend(phi, s, R, 48)))
    spread = (max(ratios) - min(ratios)) / np.mean(ratios)
    verdict(3, spread <= 0.03, f"ratio spread {spread:.2%} over 5 bumps (<= 3%), ratios "
            + ", ".join(f"{r:.4f}" for r in ratios))


def test_criterion_04_renormalization(verdict, cubic):
    s = 0.25
    lay = solve_layer(cubic, s, 40.0, 801)
    x = lay.x
    phi = GridFunction(energy.standard_bump([x], center=0.5, radius=1.0), lay.grid.spacing, lay.grid.origin,
                       TailModel.constant(0.0))
    R_list = (4.0, 8.0, 16.0, 32.0)
    tab = energy.verify_renormalization(lay.grid, phi, s, R_list, zmesh=48, tol=0.05)
    last = tab.rows[-1]
    pair = max(abs(last["gap12"]), abs(last["gap13"]),
               abs(last["extension"] - last["extension_inf"]) / abs(last["extension"]))
    gap = np.abs(tab.gap23())
    slope = float(np.polyfit(np.log(R_list), np.log(gap), 1)[0])
    ok_pair = pair <= 0.05
    ok_slope = -2 * s - 0.15 <= slope <= -2 * s + 0.15
    verdict(4, ok_pair and ok_slope,
            f"pairwise gap at R=32 {pair:.2%} (<= 5%); gap exponent {slope:.3f} "
            f"(window [{-2 * s - 0.15:.2f}, {-2 * s + 0.15:.2f}])")


def test_criterion_05_layer_suite(verdict, cubic, layer025, layer05):
    parts = []
    ok = True
    for lay in (layer025, layer05):
        lim = limit_trichotomy(lay, cubic)
        good = (lay.residual_norm <= 1e-4 and bool(np.all(np.diff(lay.values) > 0))
                and tuple(lim) == (-1.0, 1.0))
        ok &= good
        parts.append(f"s={lay.s}: residual {lay.residual_norm:.1e}, limits {tuple(lim)}")
    gm, gp = analysis.g_balance(cubic, "minus"), analysis.g_balance(cubic, "plus")
    ok &= abs(gm + 0.25) < 1e-12 and abs(gp - 0.25) < 1e-12
    verdict(5, ok, "; ".join(parts) + f"; G-balance ({gm:.4f}, {gp:.4f})")


def test_criterion_06_rescaling_instability(verdict, cubic):
    tab = analysis.rescaling_instability_test(0.25, nl=cubic)
    small = [r[1] for r in tab.rows if r[0] <= 0.05]
    rel = max(abs(p - q) / abs(q) for p, q in zip(tab.exponents, tab.expected))
    ok = bool(small) and max(small) < 0 and rel <= 0.1
    verdict(6, ok, f"max form for eps <= 0.05 is {max(small):.3g}; exponents "
            f"({tab.exponents[0]:.4f}, {tab.exponents[1]:.4f}) vs {tab.expected}, relative error {rel:.2%}")


def test_criterion_07_stability_null_mode(verdict, cubic, layer025):
    s, R, zm = 0.25, 32.0, 48
    sf = analysis.make_stability_form(layer025.grid, s, cubic, R=R, zmesh=zm)
    mode = analysis.harmonic_test_field(analysis.translation_mode(layer025.grid, R), s, R, zm)
    kin, pot, nrm = analysis.stability_parts(sf, mode)
    null = (kin + pot) / nrm
    worst = min((lambda p: (p[0] + p[1]) / p[2])(analysis.stability_parts(sf, z))
                for z in analysis.random_test_fields(sf, R, 50, seed=7, zmesh=zm))
    verdict(7, abs(null) <= 1e-2 and worst >= -1e-2,
            f"normalized null-mode value {null:.2e} (|.| <= 1e-2); min over 50 random fields {worst:.3f}")


def test_criterion_08_minimality_battery(verdict, cubic, tensor_solution):
    u = tensor_solution
    rep = analysis.constrained_minimality_test(u, -1.0, 1.0, 0.5, 8.0, trials=50, nl=cubic, seed=11)
    R, zm = 8.0, 24
    c = energy.calibrate(2, 0.5, u.spacing, R, zm, radius=2.0).extended_constant
    E = analysis.extended_minimizer(u, 0.5, R, c, cubic, zmesh=zm)
    lo, hi = -np.ones(E.nodal.shape), np.ones(E.nodal.shape)
    rng = np.random.default_rng(8)
    glued = [analysis.glue_competitors(E, analysis.random_glue_perturbation(E, rng), lo, hi, c, cubic)
             for _ in range(20)]
    slack = min(min(r[4] for r in g.ledger if r[1] != "regions_sum") for g in glued)
    ok = rep.trials == 50 and rep.min_difference >= -1e-8 and all(g.passed for g in glued)
    verdict(8, ok, f"min constrained difference {rep.min_difference:.3e} over {rep.trials} trials; "
            f"worst ledger slack {slack:.3e} over 20 glued competitors")


def test_criterion_09_sliding(verdict, cubic, layer025, layer05, tensor_solution):
    sols = {"layer s=0.25": layer025.grid, "layer s=0.5": layer05.grid, "tensor 2D": tensor_solution}
    sols["rotated 2D"] = solve_monotone_2d(cubic, 0.5, (6, 10), rotated_layer_data(layer05, 10.0), tol=1e-8,
                                           h=0.25, frame=8)
    sols["two-profile 2D"] = solve_monotone_2d(cubic, 0.5, (6, 8), two_profile_data(layer05), tol=1e-8,
                                               h=0.25, frame=4)
    ks = np.linspace(0.0, 4.0, 41)
    stars = {name: analysis.sliding_verify(u, u, ks).k_star for name, u in sols.items()}
    verdict(9, all(k == 0.0 for k in stars.values()),
            "k_star " + ", ".join(f"{name}: {k:g}" for name, k in stars.items()))


def test_criterion_10_symmetry(verdict, layer05):
    angle = 10.0
    g = rotated_layer_data(layer05, angle).tabulate((20, 20), 0.1)
    tab = analysis.blowdown(g, (1.0, 0.5, 0.25, 0.125))
    err = max(abs(r[2] - (90.0 - angle)) for r in tab.rows)
    d = tab.distances
    decreasing = bool(np.all(np.diff(d) < 0))
    resid = analysis.fit_1d(saddle_field(6.0, 0.1)).residual
    verdict(10, err <= 1.0 and decreasing and resid > 0.1,
            f"direction error {err:.3f} deg; L1 distances " + ", ".join(f"{v:.4f}" for v in d)
            + f"; saddle fit residual {resid:.3f} (> 0.1)")


def test_criterion_11_determinism(verdict, tmp_path):
    cfg = str(CONFIGS / "constrained_min.ini")
    codes = [main(["run", "--config", cfg, "--out", str(tmp_path / tag)]) for tag in ("a", "b")]
    (da,), (db,) = list((tmp_path / "a").iterdir()), list((tmp_path / "b").iterdir())
    names = sorted(p.name for p in da.glob("*.csv"))
    same = names == sorted(p.name for p in db.glob("*.csv")) and all(
        (da / n).read_bytes() == (db / n).read_bytes() for n in names)
    seed = json.loads((da / "manifest.json").read_text())["config"]["seed"]
    verdict(11, codes == [0, 0] and same and bool(names),
            f"{len(names)} CSV files byte-identical across two runs (seed {seed}), exit codes {codes}")
