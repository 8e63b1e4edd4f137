"""Command line runner.

    fraclab run --config exp.ini [--seed N] [--out DIR]
    fraclab plotdata --in table.csv --kind renormalization

``run`` writes one directory per configuration (named by its content hash)
holding the CSV tables, grid snapshots and ``manifest.json``.  Exit codes:
0 success, 2 configuration or input error, 3 numerical failure, 4 a check
or invariant failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from . import analysis, energy, io, solver
from .config import ConfigError, ExperimentConfig, load_config
from .fracop import ContractError, GridFunction, TailModel, frac_constant
from .model import make_polynomial_nonlinearity, nonlinearity_from_name

log = logging.getLogger("fraclab")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_CHECK = 0, 2, 3, 4


@dataclass
class Outcome:
    tables: dict = field(default_factory=dict)  # file stem -> CsvBlock
    grids: dict = field(default_factory=dict)  # file stem -> GridFunction
    checks: list = field(default_factory=list)  # (name, passed, value)
    constants: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def check(self, name, passed, value):
        self.checks.append((name, bool(passed), float(value)))


def make_nonlinearity(spec: str):
    spec = spec.strip()
    if "," in spec:
        try:
            coeffs = [float(c) for c in spec.split(",")]
        except ValueError:
            raise ConfigError(f"bad polynomial coefficients {spec!r}", "experiment", "nonlinearity") from None
        return make_polynomial_nonlinearity(coeffs)
    try:
        return nonlinearity_from_name(spec)
    except ValueError as exc:
        raise ConfigError(str(exc), "experiment", "nonlinearity") from None


def _layer(cfg, nl, s=None):
    p = cfg.layer
    return solver.solve_layer(nl, cfg.s if s is None else s, p.X, p.N, tol=p.tol)


def _scenario_data(cfg, layer):
    g = cfg.grid2d
    if g.scenario == "tensor":
        return solver.tensor_layer_data(layer)
    if g.scenario == "rotated":
        return solver.rotated_layer_data(layer, g.angle)
    return solver.two_profile_data(layer)


def _solve_2d(cfg, nl, layer):
    g = cfg.grid2d
    bd = _scenario_data(cfg, layer)
    return bd, solver.solve_monotone_2d(nl, cfg.s, (g.L1, g.L2), bd, tol=g.tol, h=g.h, frame=g.frame)


def _layer_tables(out: Outcome, layer, nl):
    prof = io.CsvBlock("layer_profile", ("x", "u"))
    for x, u in zip(layer.x, layer.values):
        prof.add(x, u)
    hist = io.CsvBlock("layer_history", ("stage", "step", "residual"))
    for row in layer.history:
        hist.add(*row)
    out.tables["layer_profile"] = prof
    out.tables["layer_history"] = hist
    out.grids["layer"] = layer.grid


def exp_layer(cfg, nl, rng) -> Outcome:
    out = Outcome()
    layer = _layer(cfg, nl)
    _layer_tables(out, layer, nl)
    lim = solver.limit_trichotomy(layer, nl)
    gm, gp = analysis.g_balance(nl, "minus"), analysis.g_balance(nl, "plus")
    summ = io.CsvBlock("layer_summary", ("quantity", "value"))
    for k, v in (("residual", layer.residual_norm), ("min_slope", layer.min_slope), ("mismatch", layer.mismatch),
                 ("limit_minus", lim.minus), ("limit_plus", lim.plus), ("raw_minus", lim.raw_minus),
                 ("raw_plus", lim.raw_plus), ("g_minus", gm), ("g_plus", gp)):
        summ.add(k, v)
    out.tables["layer_summary"] = summ
    out.check("residual", layer.residual_norm <= cfg.layer.tol, layer.residual_norm)
    out.check("monotone", layer.min_slope > 0, layer.min_slope)
    out.check("limits", (lim.minus, lim.plus) == (-1.0, 1.0), lim.snap_distance)
    # half-branch connections would need a vanishing G difference
    out.check("g_balance_excludes_half_branches", gm != 0 and gp != 0, min(abs(gm), abs(gp)))
    return out


def exp_renormalization(cfg, nl, rng) -> Outcome:
    out = Outcome()
    layer = _layer(cfg, nl)
    x = layer.x
    phi = GridFunction(energy.standard_bump([x], center=cfg.energy.bump_center,
                                             radius=cfg.energy.bump_radius), layer.grid.spacing,
                       layer.grid.origin, TailModel.constant(0.0))
    tab = energy.verify_renormalization(layer.grid, phi, cfg.s, cfg.energy.R_list, zmesh=cfg.energy.zmesh,
                                        tol=cfg.energy.tol)
    b = io.CsvBlock("renormalization", tab.columns + ("gap23",))
    for row, g23 in zip(tab.rows, tab.gap23()):
        b.add(*[row[c] for c in tab.columns], g23)
    out.tables["renormalization"] = b
    out.constants["calibration_ratio"] = tab.calibration.ratio
    out.constants["extended_constant"] = tab.calibration.extended_constant
    R = np.array([r["R"] for r in tab.rows])
    gap = np.abs(tab.gap23())
    if len(R) >= 2 and np.all(gap > 0):
        out.constants["gap23_exponent"] = float(np.polyfit(np.log(R), np.log(gap), 1)[0])
    out.check("pairwise_agreement", tab.passed, max(abs(tab.rows[-1]["gap12"]), abs(tab.rows[-1]["gap13"])))
    return out


def exp_stability(cfg, nl, rng) -> Outcome:
    out = Outcome()
    a, R = cfg.analysis, cfg.energy.R
    layer = _layer(cfg, nl)
    sf = analysis.make_stability_form(layer.grid, cfg.s, nl, R=R, zmesh=a.zmesh)
    out.constants["extended_constant"] = sf.constant
    b = io.CsvBlock("stability", ("field", "kinetic", "potential", "norm", "normalized"))
    zeta = analysis.harmonic_test_field(analysis.translation_mode(layer.grid, R), cfg.s, R, a.zmesh)
    kin, pot, nrm = analysis.stability_parts(sf, zeta)
    null = (kin + pot) / nrm
    b.add("translation", kin, pot, nrm, null)
    worst = np.inf
    seed = int(rng.integers(2 ** 31))
    for i, z in enumerate(analysis.random_test_fields(sf, R, a.count, seed=seed, zmesh=a.zmesh)):
        kin, pot, nrm = analysis.stability_parts(sf, z)
        b.add(f"random{i}", kin, pot, nrm, (kin + pot) / nrm)
        worst = min(worst, (kin + pot) / nrm)
    out.tables["stability"] = b
    out.check("null_mode", abs(null) <= a.null_tol, null)
    out.check("random_fields_nonnegative", worst >= -a.null_tol, worst)
    tab = analysis.rescaling_instability_test(cfg.s, eps_list=a.rescale_eps, nl=nl)
    out.tables["rescaling"] = tab.csv()
    small = [r[1] for r in tab.rows if r[0] <= 0.05]
    out.check("rescaling_negative", bool(small) and max(small) < 0, max(small) if small else np.nan)
    rel = max(abs(p - q) / abs(q) for p, q in zip(tab.exponents, tab.expected))
    out.check("rescaling_exponents", rel <= 0.1, rel)
    return out


def _solutions(cfg, nl):
    """Monotone solutions the sliding check runs on: the layer, plus the 2D solve when n = 2."""
    layer = _layer(cfg, nl)
    sols = [("layer", layer.grid)]
    if cfg.n >= 2:
        _, u = _solve_2d(cfg, nl, layer)
        sols.append((cfg.grid2d.scenario, u))
    return layer, sols


def exp_sliding(cfg, nl, rng) -> Outcome:
    out = Outcome()
    a = cfg.analysis
    ks = np.linspace(0.0, a.k_max, a.k_steps)
    _, sols = _solutions(cfg, nl)
    b = io.CsvBlock("sliding", ("solution", "k", "min_gap", "dominates"))
    for name, u in sols:
        rep = analysis.sliding_verify(u, u, ks)
        for row in rep.rows:
            b.add(name, *row)
        out.check(f"k_star_{name}", rep.k_star == 0.0, rep.k_star)
        out.grids[f"solution_{name}"] = u
    out.tables["sliding"] = b
    return out


def _minimality_target(cfg, nl):
    layer = _layer(cfg, nl)
    if cfg.n == 1:
        return layer.grid, -1.0, 1.0
    bd, u = _solve_2d(cfg, nl, layer)
    return u, bd.under, bd.over


def exp_constrained_min(cfg, nl, rng) -> Outcome:
    out = Outcome()
    a = cfg.analysis
    u, under, over = _minimality_target(cfg, nl)
    rep = analysis.constrained_minimality_test(u, under, over, cfg.s, cfg.energy.R, trials=a.trials, nl=nl,
                                               seed=int(rng.integers(2 ** 31)), slack=a.slack)
    out.tables["constrained_min"] = rep.csv()
    out.grids["solution"] = u
    out.notes += rep.log
    out.check("min_difference", rep.passed, rep.min_difference)
    return out


def exp_glue(cfg, nl, rng) -> Outcome:
    out = Outcome()
    a = cfg.analysis
    u, _, _ = _minimality_target(cfg, nl)
    R = cfg.energy.R
    cal = energy.calibrate(u.dim, cfg.s, u.spacing, R, a.zmesh, radius=2.0)
    c = cal.extended_constant
    out.constants["extended_constant"] = c
    E = analysis.extended_minimizer(u, cfg.s, R, c, nl, zmesh=a.zmesh)
    out.constants["extended_minimizer_gradient"] = E.info["gradient"]
    lo, hi = -np.ones(E.nodal.shape), np.ones(E.nodal.shape)
    b = io.CsvBlock("glue_ledger", ("trial", "region", "field", "energy", "bound", "slack"))
    worst = np.inf
    ok = True
    for i in range(a.glue_trials):
        g = analysis.glue_competitors(E, analysis.random_glue_perturbation(E, rng), lo, hi, c, nl, slack=a.slack)
        for row in g.ledger:
            b.add(i, *row)
        worst = min(worst, min(r[4] for r in g.ledger if r[1] != "regions_sum"))
        ok &= g.passed
    out.tables["glue_ledger"] = b
    out.check("ledger_chain", ok, worst)
    return out


def _rotated_field(cfg, nl, layer=None):
    layer = layer or _layer(cfg, nl)
    g = cfg.grid2d
    return solver.rotated_layer_data(layer, g.angle).tabulate((g.L1, g.L1), g.h)


def exp_blowdown(cfg, nl, rng) -> Outcome:
    out = Outcome()
    if cfg.n == 1:
        u = _layer(cfg, nl).grid
        expected = 0.0
    else:
        u = _rotated_field(cfg, nl)
        expected = 90.0 - cfg.grid2d.angle
    tab = analysis.blowdown(u, cfg.analysis.eps_list)
    out.tables["blowdown"] = tab.csv()
    d = tab.distances
    out.check("distance_decreasing", bool(np.all(np.diff(d) < 0)), float(np.max(np.diff(d))))
    err = max(abs((r[2] - expected + 180) % 360 - 180) for r in tab.rows)
    out.check("direction", err <= 1.0, err)
    return out


def saddle_field(L: float, h: float) -> GridFunction:
    """tanh(x1) tanh(x2): a genuinely two-dimensional control."""
    x = np.arange(-round(L / h), round(L / h) + 1) * h
    X1, X2 = np.meshgrid(x, x, indexing="ij")
    return GridFunction(np.tanh(X1) * np.tanh(X2), h, (x[0], x[0]), TailModel.edge())


def exp_fit1d(cfg, nl, rng) -> Outcome:
    out = Outcome()
    g = cfg.grid2d
    u = _rotated_field(cfg, nl)
    fit = analysis.fit_1d(u)
    ctrl = analysis.fit_1d(saddle_field(g.L1, g.h))
    b = io.CsvBlock("fit1d", ("field", "angle_deg", "residual"))
    b.add("rotated_layer", fit.angle_deg, fit.residual)
    b.add("saddle_control", ctrl.angle_deg, ctrl.residual)
    out.tables["fit1d"] = b
    err = abs(fit.angle_deg - (90.0 - g.angle))
    out.check("direction", err <= 1.0, err)
    out.check("negative_control", ctrl.residual > 0.1, ctrl.residual)
    return out


def exp_full_pipeline(cfg, nl, rng) -> Outcome:
    if cfg.n != 2:
        raise ConfigError("full_pipeline runs in two dimensions; set n = 2", "experiment", "n")
    out = Outcome()
    a, R = cfg.analysis, cfg.energy.R
    b = io.CsvBlock("pipeline", ("stage", "quantity", "value"))
    layer = _layer(cfg, nl)
    b.add("layer", "residual", layer.residual_norm)
    bd, u = _solve_2d(cfg, nl, layer)
    out.grids["solution"] = u
    b.add("solve", "residual", u.info["residual"])
    b.add("solve", "min_slope", u.info["min_slope"])
    try:
        prof = solver.profiles_at_infinity(u, cfg.s)
        b.add("profiles", "disagreement", prof.disagreement)
    except solver.InconclusiveError as exc:
        b.add("profiles", "inconclusive", np.nan)
        out.notes.append(f"profiles: {exc}")
    sf = analysis.make_stability_form(u, cfg.s, nl, R=R, zmesh=a.zmesh)
    zeta = analysis.harmonic_test_field(analysis.translation_mode(u, R), cfg.s, R, a.zmesh)
    kin, pot, nrm = analysis.stability_parts(sf, zeta)
    b.add("stability", "null_mode", (kin + pot) / nrm)
    rep = analysis.constrained_minimality_test(u, bd.under, bd.over, cfg.s, R, trials=a.trials, nl=nl,
                                               seed=int(rng.integers(2 ** 31)), slack=a.slack)
    b.add("minimality", "min_difference", rep.min_difference)
    tab = analysis.blowdown(u, a.eps_list)
    for r in tab.rows:
        b.add("blowdown", f"l1_eps_{r[0]!r}", r[1])
        b.add("blowdown", f"angle_eps_{r[0]!r}", r[2])
    L1, L2 = cfg.grid2d.L1, cfg.grid2d.L2
    X1, X2 = u.coords()
    inner = (np.abs(X1) <= L1 - cfg.grid2d.frame * u.spacing) & (np.abs(X2) <= L2 - cfg.grid2d.frame * u.spacing)
    fit = analysis.fit_1d(u, region=inner)
    b.add("fit1d", "angle_deg", fit.angle_deg)
    b.add("fit1d", "residual", fit.residual)
    out.tables["pipeline"] = b
    out.check("solve_monotone", u.info["min_slope"] > 0, u.info["min_slope"])
    out.check("minimality", rep.passed, rep.min_difference)
    d = tab.distances
    out.check("blowdown_decreasing", bool(np.all(np.diff(d) <= 0)), float(np.max(np.diff(d))))
    return out


EXPERIMENTS = {
    "layer": exp_layer, "renormalization": exp_renormalization, "stability": exp_stability,
    "sliding": exp_sliding, "constrained_min": exp_constrained_min, "glue": exp_glue,
    "blowdown": exp_blowdown, "fit1d": exp_fit1d, "full_pipeline": exp_full_pipeline,
}


def _versions() -> dict:
    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"fraclab": own, "numpy": np.__version__, "scipy": scipy.__version__, "python": sys.version.split()[0]}


def run_experiment(cfg: ExperimentConfig, out_root=None) -> tuple[int, Path]:
    """Run one configured experiment and persist its artifacts; returns (exit code, run directory)."""
    nl = make_nonlinearity(cfg.nonlinearity)
    rng = np.random.default_rng(cfg.seed)
    run_dir = Path(out_root or cfg.output_dir) / cfg.digest()
    run_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    res = EXPERIMENTS[cfg.experiment](cfg, nl, rng)
    wall = time.perf_counter() - t0
    files = []
    for stem, block in res.tables.items():
        block.write(run_dir / f"{stem}.csv")
        files.append(f"{stem}.csv")
    for stem, grid in res.grids.items():
        io.save_grid(run_dir / f"{stem}.grd", grid)
        files.append(f"{stem}.grd")
    checks = io.CsvBlock("checks", ("check", "passed", "value"))
    for c in res.checks:
        checks.add(*c)
    checks.write(run_dir / "checks.csv")
    manifest = {
        "config": cfg.as_dict(), "versions": _versions(), "wall_time_s": wall,
        "constants": dict(res.constants, c_ns=frac_constant(cfg.n, cfg.s).value, kappa=nl.kappa,
                          c_kappa=nl.c_kappa),
        "checks": [{"name": n, "passed": p, "value": v} for n, p, v in res.checks],
        "notes": res.notes, "files": sorted(files + ["checks.csv"]),
    }
    for stem, grid in res.grids.items():
        info = {k: v for k, v in grid.info.items() if isinstance(v, (int, float, str, list))}
        manifest.setdefault("solutions", {})[stem] = info
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    failed = [n for n, p, _ in res.checks if not p]
    for n, p, v in res.checks:
        print(f"{'PASS' if p else 'FAIL'} {n} ({v:.6g})")
    print(f"artifacts in {run_dir}")
    return (EXIT_CHECK if failed else EXIT_OK), run_dir


# plot descriptions: kind -> (x column, y columns, log x, log y, use |y|)
PLOT_KINDS = {
    "renormalization": ("R", ("gap12", "gap13", "gap23"), True, True, True),
    "layer": ("x", ("u",), False, False, False),
    "history": ("step", ("residual",), False, True, False),
    "blowdown": ("eps", ("l1",), True, True, False),
    "rescaling": ("eps", ("form", "kinetic", "potential"), True, False, False),
    "stability": ("field", ("normalized",), False, False, False),
    "sliding": ("k", ("min_gap",), False, False, False),
    "constrained_min": ("trial", ("difference",), False, False, False),
    "glue": ("trial", ("slack",), False, False, False),
}


def _num(v: str):
    try:
        return float(v)
    except ValueError:
        return v


def plotdata(csv_in, kind: str) -> Path:
    """Write ``<csv>.<kind>.plot.json`` describing series, axes and log flags."""
    if kind not in PLOT_KINDS:
        raise ConfigError(f"unknown plot kind {kind!r}; expected one of {', '.join(PLOT_KINDS)}")
    path = Path(csv_in)
    if not path.is_file():
        raise ConfigError(f"no such CSV file: {path}")
    cols, rows = io.read_csv(path)
    xcol, ycols, logx, logy, absy = PLOT_KINDS[kind]
    for c in (xcol,) + ycols:
        if c not in cols:
            raise ConfigError(f"missing column {c!r} in {path.name} (has {', '.join(cols)})")
    x = [_num(r[xcol]) for r in rows]
    series = []
    for c in ycols:
        y = [_num(r[c]) for r in rows]
        if absy:
            y = [abs(v) if isinstance(v, float) else v for v in y]
        series.append({"label": c, "x": x, "y": y})
    desc = {"kind": kind, "source": path.name, "x_axis": {"label": xcol, "log": logx},
            "y_axis": {"label": ", ".join(ycols), "log": logy, "absolute": absy}, "series": series}
    target = path.with_name(f"{path.stem}.{kind}.plot.json")
    target.write_text(json.dumps(desc, indent=2))
    return target


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="fraclab", description="Fractional Allen-Cahn layer experiments")
    sub = ap.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run an experiment from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.add_argument("-v", "--verbose", action="store_true")
    p = sub.add_parser("plotdata", help="turn a CSV table into a plot description")
    p.add_argument("--in", dest="csv_in", required=True)
    p.add_argument("--kind", required=True)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.cmd == "plotdata":
        try:
            print(plotdata(args.csv_in, args.kind))
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        return EXIT_OK
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        code, _ = run_experiment(cfg, args.out)
        return code
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AssertionError as exc:
        print(f"invariant failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (RuntimeError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
