"""Diagnostics around stability, minimality and one-dimensional symmetry.

Every check here is a numerical experiment on the discrete objects built by
the other modules: the stability form uses the calibrated extended energy,
minimality tests use the renormalized Gagliardo difference, and the gluing
ledger evaluates the local extended energy at quadrature points so that
region splits are exact.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import pyamg
from scipy import optimize, sparse
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse.linalg import cg

from .energy import (Calibration, calibrate, dirichlet_solve, full_functional_difference, standard_bump)
from .extension import (ExtensionField, _region_slices, _resolve_zmesh, extend, quadrature_sample,
                        weighted_dirichlet, weighted_stiffness)
from .fracop import ContractError, GridFunction, TailModel
from .io import CsvBlock
from .model import Nonlinearity, _integrate_f, make_cubic_nonlinearity, make_potential

log = logging.getLogger(__name__)


def _trace_weights(base: GridFunction) -> np.ndarray:
    """Trapezoid weights of the trace nodes."""
    w = np.ones(base.shape)
    for d, N in enumerate(base.shape):
        wd = np.full(N, base.spacing)
        wd[[0, -1]] *= 0.5
        shp = [1] * base.dim
        shp[d] = N
        w = w * wd.reshape(shp)
    return w


def _subgrid(u: GridFunction, base: GridFunction) -> np.ndarray:
    """Values of u on the nodes of ``base`` (same spacing, aligned origin)."""
    if not np.isclose(u.spacing, base.spacing):
        raise ContractError("grids must share the spacing")
    sl = []
    for d in range(u.dim):
        off = (base.origin[d] - u.origin[d]) / u.spacing
        k = int(round(off))
        if abs(off - k) > 1e-6 or k < 0 or k + base.shape[d] > u.shape[d]:
            raise ContractError("the extension mesh is not a sub-grid of u")
        sl.append(slice(k, k + base.shape[d]))
    return u.values[tuple(sl)]


# --------------------------------------------------------------------------
# stability form


@dataclass
class StabilityForm:
    """zeta -> c int z^a |grad zeta|^2 + int F''(u) zeta(., 0)^2 with c calibrated."""

    u: GridFunction
    s: float
    constant: float
    nl: Nonlinearity
    calibration: Optional[Calibration] = None


def make_stability_form(u: GridFunction, s: float, nl: Optional[Nonlinearity] = None, R: float = 8.0,
                        zmesh=32, calibration: Optional[Calibration] = None,
                        calibration_radius: float = 2.0) -> StabilityForm:
    """Stability form of u, with the extended-energy constant calibrated on (h, R, zmesh).

    The calibration bump should be about as smooth as the fields the form is
    applied to; a radius-1 bump at h = 0.1 is resolved noticeably worse by the
    extension mesh than a layer derivative is.
    """
    cal = calibration or calibrate(u.dim, s, u.spacing, R, zmesh, radius=calibration_radius)
    return StabilityForm(u, s, cal.extended_constant, nl or make_cubic_nonlinearity(), cal)


def _check_support(zeta: ExtensionField, tol=1e-12):
    nodal = zeta.nodal
    scale = max(1.0, float(np.max(np.abs(nodal))))
    if np.max(np.abs(nodal[zeta.boundary_mask()])) > tol * scale:
        raise ContractError("zeta must vanish on the lateral and top faces")


def stability_parts(sf: StabilityForm, zeta: ExtensionField):
    """(kinetic, potential, norm) where norm = kinetic of zeta + ||zeta(., 0)||^2."""
    _check_support(zeta)
    if not np.isclose(zeta.s, sf.s):
        raise ContractError("zeta was built for a different s")
    u0 = _subgrid(sf.u, zeta.base)
    w = _trace_weights(zeta.base)
    z0 = zeta.base.values
    kin = sf.constant * weighted_dirichlet(zeta)
    pot = float(np.sum(w * (-sf.nl.f_prime(u0)) * z0 ** 2))
    return kin, pot, kin + float(np.sum(w * z0 ** 2))


def stability_form_eval(sf: StabilityForm, zeta: ExtensionField) -> float:
    kin, pot, _ = stability_parts(sf, zeta)
    return kin + pot


def harmonic_test_field(trace: GridFunction, s: float, R: float, zmesh=32) -> ExtensionField:
    """The discrete Dirichlet minimizer with the given trace, zero on the lateral and top faces."""
    region = _region_slices(trace, R)
    vals = trace.values[region]
    base = GridFunction(vals, trace.spacing,
                        tuple(np.array(trace.origin) + trace.spacing * np.array([r.start for r in region])),
                        TailModel.constant(0.0))
    z = _resolve_zmesh(zmesh, R, s)
    shell = ExtensionField(base, z, np.zeros(vals.shape + (z.size,)), float(R), float(s))
    fixed = shell.boundary_mask()
    if np.max(np.abs(vals[fixed[..., 0]])) > 0:
        raise ContractError("trace must vanish on the lateral faces of the box")
    fixed[..., 0] = True
    x0 = np.zeros(shell.nodal.shape)
    x0[..., 0] = vals
    A = weighted_stiffness(vals.shape, trace.spacing, shell.znodes, shell.a)
    x, _, _ = dirichlet_solve(A, fixed.ravel(), x0.ravel())
    return shell.like(x.reshape(x0.shape), TailModel.constant(0.0))


def smooth_cutoff(r, r0, r1):
    """1 for r <= r0, 0 for r >= r1, C^infinity in between."""
    r = np.asarray(r, dtype=float)
    t = np.clip((r - r0) / (r1 - r0), 0.0, 1.0)

    def g(x):
        return np.where(x > 0, np.exp(-1.0 / np.maximum(x, 1e-300)), 0.0)

    return g(1 - t) / (g(1 - t) + g(t))


def translation_mode(u: GridFunction, R: float, axis: int = -1) -> GridFunction:
    """Central-difference derivative of u along ``axis``, cut off smoothly inside |x| < 0.9 R."""
    ax = axis % u.dim
    d = np.gradient(u.values, u.spacing, axis=ax)
    r = np.sqrt(sum(x ** 2 for x in u.coords())) if u.dim > 1 else np.abs(u.coords()[0])
    return GridFunction(d * smooth_cutoff(r, 0.45 * R, 0.9 * R), u.spacing, u.origin, TailModel.constant(0.0))


def random_test_fields(sf: StabilityForm, R: float, count: int, seed: int = 0, zmesh=32, n_bumps: int = 3):
    """Random test fields: harmonic fields of random bump traces plus random interior bumps."""
    rng = np.random.default_rng(seed)
    grid_x = sf.u.coords()
    out = []
    for _ in range(count):
        tr = np.zeros(sf.u.shape)
        for _ in range(n_bumps):
            rad = rng.uniform(0.5, 0.3 * R)
            c = rng.uniform(-(0.85 * R - rad), 0.85 * R - rad, size=sf.u.dim)
            tr += rng.uniform(-1, 1) * standard_bump([x - ci for x, ci in zip(grid_x, c)], radius=rad)
        zeta = harmonic_test_field(GridFunction(tr, sf.u.spacing, sf.u.origin, TailModel.constant(0.0)),
                                   sf.s, R, zmesh)
        # add an interior bump that leaves the trace alone
        X = zeta.base.coords()
        zn = zeta.znodes
        rad = rng.uniform(0.5, 0.3 * R)
        c = rng.uniform(-(0.85 * R - rad), 0.85 * R - rad, size=sf.u.dim)
        zc = rng.uniform(rad, 0.9 * R - rad)
        Xg = [x[..., None] - ci for x, ci in zip(X, c)] + [zn - zc]
        bulk = rng.uniform(-1, 1) * standard_bump(Xg, radius=rad)
        bulk[..., 0] = 0.0
        out.append(zeta.like(zeta.nodal + bulk, TailModel.constant(0.0)))
    return out


# --------------------------------------------------------------------------
# instability of the zero state under rescaling


@dataclass
class RescalingTable:
    rows: list
    exponents: tuple  # fitted slopes of the kinetic and potential parts
    two_term: tuple  # (C1, p1, C2, p2) from a fit of the total form
    expected: tuple

    def csv(self) -> CsvBlock:
        b = CsvBlock("rescaling", ("eps", "form", "kinetic", "potential"))
        for r in self.rows:
            b.add(*r)
        return b


def rescaling_instability_test(s: float, psi=None, eps_list: Sequence[float] = (1.0, 0.5, 0.2, 0.1, 0.05, 0.02, 0.01),
                               nl: Optional[Nonlinearity] = None, h: float = 0.05, M: int = 160,
                               constant: Optional[float] = None) -> RescalingTable:
    """Stability form of u = 0 on psi_eps(x, z) = psi(eps x, eps z), n = 1, on one fixed mesh.

    ``psi`` is a callable (x, z) -> value supported in the unit half-ball or
    an ExtensionField (interpolated); the default is the radial bump.  The
    mesh covers the support of the widest psi_eps, uniform in x and
    geometric in z so that every scale is resolved alike.
    """
    nl = nl or make_cubic_nonlinearity()
    eps = np.sort(np.asarray(eps_list, dtype=float))[::-1]
    if isinstance(psi, ExtensionField):
        pts = [psi.base.axis_coords(0), psi.znodes]
        interp = RegularGridInterpolator(pts, psi.nodal, bounds_error=False, fill_value=0.0)
        fpsi = lambda x, z: interp(np.stack(np.broadcast_arrays(x, z), axis=-1))
        radius = max(abs(pts[0][0]), abs(pts[0][-1]), pts[1][-1])
    elif psi is None:
        fpsi = lambda x, z: standard_bump([x, z])
        radius = 1.0
    else:
        fpsi = psi
        radius = 1.0
    Rm = 1.05 * radius / eps.min()
    N = int(np.ceil(Rm / h))
    x = np.arange(-N, N + 1) * h
    zmesh = np.geomspace(1e-3 * h, N * h, M)
    zn = np.concatenate([[0.0], zmesh])
    a = 1 - 2 * s
    if constant is None:
        constant = calibrate(1, s, h, 8.0, 48).extended_constant
    w = np.full(x.size, h)
    w[[0, -1]] *= 0.5
    rows = []
    for e in eps:
        nodal = fpsi(e * x[:, None], e * zn[None, :])
        _, g, wts = quadrature_sample(nodal, h, zn, a)
        kin = constant * float(np.sum(wts * np.sum(g ** 2, axis=0)))
        pot = float(np.sum(w * (-nl.f_prime(0.0)) * nodal[:, 0] ** 2))
        rows.append((float(e), kin + pot, kin, pot))
    le = np.log(eps)
    p_kin = np.polyfit(le, np.log([r[2] for r in rows]), 1)[0]
    p_pot = np.polyfit(le, np.log([abs(r[3]) for r in rows]), 1)[0]
    forms = np.array([r[1] for r in rows])
    c1 = rows[0][2] / eps[0] ** p_kin
    c2 = abs(rows[0][3]) / eps[0] ** p_pot
    try:
        popt, _ = optimize.curve_fit(lambda t, A, p, B, q: A * t ** p - B * t ** q, eps, forms,
                                     p0=(c1, p_kin, c2, p_pot), maxfev=20000)
        two = tuple(float(v) for v in popt)
    except RuntimeError:
        two = (np.nan,) * 4
    return RescalingTable(rows, (float(p_kin), float(p_pot)), two, (2 * s - 1, -1.0))


# --------------------------------------------------------------------------
# G-balance


def g_balance(nl: Nonlinearity, branch: str) -> float:
    """int of f over the branch interval: 'minus' is [-1, 0], 'plus' is [0, 1]."""
    if branch == "minus":
        return _integrate_f(nl, -1.0, 0.0)
    if branch == "plus":
        return _integrate_f(nl, 0.0, 1.0)
    raise ValueError("branch must be 'minus' or 'plus'")


# --------------------------------------------------------------------------
# sliding


def _tail_value_along(u: GridFunction, ax: int, above: bool):
    t = u.tail
    if t.kind == "pm1":
        return float(t.direction if above else -t.direction)
    if t.kind == "constant":
        return float(t.value)
    return None  # edge: use the last row


def shift_with_tail(u: GridFunction, k: float, axis: int = -1) -> np.ndarray:
    """Values of x -> u(x + k e_axis) on u's nodes, k >= 0, linear between nodes."""
    ax = axis % u.dim
    h = u.spacing
    N = u.shape[ax]
    top = _tail_value_along(u, ax, True)
    v = np.moveaxis(u.values, ax, -1)
    ext_row = v[..., -1:] if top is None else np.full(v.shape[:-1] + (1,), top)
    m = int(np.floor(k / h))
    frac = k / h - m
    pad = np.concatenate([v] + [ext_row] * (m + 2), axis=-1)
    w = (1 - frac) * pad[..., m:m + N] + frac * pad[..., m + 1:m + 1 + N]
    return np.moveaxis(w, -1, ax)


@dataclass
class SlidingReport:
    k_star: float
    k_bar: Optional[float]
    touching_point: Optional[tuple]
    rows: list
    dominated: bool
    message: str = ""

    def csv(self) -> CsvBlock:
        b = CsvBlock("sliding", ("k", "min_gap", "dominates"))
        for r in self.rows:
            b.add(*r)
        return b


def sliding_verify(u: GridFunction, w_o: GridFunction, k_grid: Sequence[float], R: Optional[float] = None,
                   axis: int = -1, touch_tol: float = 1e-12) -> SlidingReport:
    """Slide w_k = u(. + k e_n) down from the largest k; k_star is where domination of w_o stops.

    Domination w_k > w_o is tested on the nodes whose shifted position stays
    in the box (or on every node when the tail is a constant), restricted to
    B_R when R is given.
    """
    if w_o.shape != u.shape:
        raise ContractError("u and w_o must share the grid")
    ax = axis % u.dim
    ks = np.sort(np.asarray(k_grid, dtype=float))
    X = u.coords()
    xa = X[ax]
    ball = np.ones(u.shape, bool) if R is None else (np.sqrt(sum(x ** 2 for x in X)) <= R)
    rows = []
    gaps = {}
    for k in ks:
        wk = shift_with_tail(u, k, ax)
        sel = ball.copy()
        if u.tail.kind not in ("pm1", "constant"):
            sel &= xa + k <= xa.max() + 1e-12 * u.spacing
        d = (wk - w_o.values)[sel]
        gap = float(d.min()) if d.size else np.inf
        gaps[k] = (gap, wk, sel)
        rows.append((float(k), gap, bool(gap > 0)))
    dom = [k for k in ks if gaps[k][0] > 0]
    if not dom:
        return SlidingReport(np.nan, None, None, rows, False, "no domination at grid resolution")
    k_bar = float(ks[-1]) if gaps[ks[-1]][0] > 0 else float(min(dom))
    # decrease k from k_bar until domination fails
    k_star = k_bar
    touching = None
    for k in ks[::-1]:
        if k > k_bar:
            continue
        gap, wk, sel = gaps[k]
        if gap > 0:
            k_star = float(k)
            continue
        if gap >= -touch_tol:
            k_star = float(k)  # touching without crossing
        d = np.where(sel, wk - w_o.values, np.inf)
        idx = np.unravel_index(np.argmin(d), d.shape)
        touching = tuple(float(x[idx]) for x in X)
        break
    return SlidingReport(k_star, k_bar, touching, rows, True)


# --------------------------------------------------------------------------
# constrained minimality


def _profile_on(u: GridFunction, p, ax: int) -> np.ndarray:
    """Broadcast a profile of x' (GridFunction, callable or number) to u's grid."""
    if isinstance(p, GridFunction):
        vals = p.values
        if u.dim == 1:
            return np.full(u.shape, float(vals.ravel()[0]))
        return np.expand_dims(vals, ax) * np.ones(u.shape)
    if callable(p):
        X = u.coords()
        lat = [X[d] for d in range(u.dim) if d != ax]
        return np.broadcast_to(p(*lat) if lat else p(), u.shape).astype(float)
    return np.full(u.shape, float(p))


def tensor_bump(X, centers, radius):
    out = np.ones(X[0].shape)
    for x, c in zip(X, centers):
        out = out * standard_bump([x - c], radius=radius)
    return out


@dataclass
class MinimalityReport:
    rows: list
    min_difference: float
    trials: int
    rejected: int
    slack: float
    passed: bool
    log: list = field(default_factory=list)

    def csv(self) -> CsvBlock:
        b = CsvBlock("constrained_min", ("trial", "scale", "amplitude", "difference"))
        for r in self.rows:
            b.add(*r)
        return b


def sample_admissible_phi(u: GridFunction, lo: np.ndarray, hi: np.ndarray, R: float, rng, n_bumps: int = 4,
                          max_radius: Optional[float] = None):
    """Tensor-bump perturbation in B_R, rescaled so that lo <= u + phi <= hi; (phi, scale) or None."""
    X = u.coords()
    n = u.dim
    phi = np.zeros(u.shape)
    rmax = max_radius or 0.4 * R
    for _ in range(n_bumps):
        r = rng.uniform(0.5, rmax)
        reach = R - r * np.sqrt(n)
        if reach <= 0:
            continue
        dirn = rng.standard_normal(n)
        dirn /= np.linalg.norm(dirn)
        c = dirn * reach * rng.uniform() ** (1.0 / n)
        phi += rng.uniform(-1, 1) * tensor_bump(X, c, r)
    if not np.any(phi):
        return None
    with np.errstate(over="ignore", divide="ignore"):
        up = np.where(phi > 0, (hi - u.values) / np.where(phi > 0, phi, 1), np.inf)
        dn = np.where(phi < 0, (lo - u.values) / np.where(phi < 0, phi, 1), np.inf)
    lam = float(min(up.min(), dn.min()))
    if lam <= 1e-8:
        return None
    scale = min(1.0, lam) * rng.uniform(0.05, 1.0)
    w = u.values + scale * phi
    # u itself may sit outside [lo, hi] where phi does not reach
    if np.any(w > hi + 1e-14) or np.any(w < lo - 1e-14):
        return None
    return phi * scale, scale


def constrained_minimality_test(u: GridFunction, under, over, s: float, R: float, trials: int = 50,
                                nl: Optional[Nonlinearity] = None, seed: int = 0, slack: float = 1e-8,
                                extra=(), axis: int = -1, n_bumps: int = 4) -> MinimalityReport:
    """full_functional_difference(u, phi) >= -slack for random phi in B_R with under <= u + phi <= over.

    ``extra`` holds hand-made perturbations; inadmissible ones are excluded
    and logged.
    """
    nl = nl or make_cubic_nonlinearity()
    ax = axis % u.dim
    lo = _profile_on(u, under, ax)
    hi = _profile_on(u, over, ax)
    rng = np.random.default_rng(seed)
    rows, notes = [], []
    rejected = 0

    def run(i, phi, scale):
        g = GridFunction(phi, u.spacing, u.origin, TailModel.constant(0.0))
        val = full_functional_difference(u, g, s, R, nl).value
        rows.append((i, float(scale), float(np.max(np.abs(phi))), float(val)))

    for j, phi in enumerate(extra):
        phi = np.asarray(phi, dtype=float)
        if np.any(u.values + phi > hi + 1e-14) or np.any(u.values + phi < lo - 1e-14):
            rejected += 1
            notes.append(f"extra perturbation {j} leaves [under, over]; excluded")
            continue
        run(-1 - j, phi, 1.0)
    attempts = 0
    done = 0
    while done < trials and attempts < 20 * max(trials, 1):
        attempts += 1
        got = sample_admissible_phi(u, lo, hi, R, rng, n_bumps)
        if got is None:
            rejected += 1
            continue
        run(done, *got)
        done += 1
    if done == 0 and trials > 0:
        notes.append("sampler found no admissible perturbation")
    vals = [r[3] for r in rows]
    mn = float(min(vals)) if vals else np.nan
    passed = bool(vals) and mn >= -slack
    for nmsg in notes:
        log.info(nmsg)
    return MinimalityReport(rows, mn, done, rejected, slack, passed, notes)


# --------------------------------------------------------------------------
# gluing


def extended_minimizer(u: GridFunction, s: float, R: float, constant: float, nl: Optional[Nonlinearity] = None,
                       zmesh=32, tol: float = 1e-11, max_newton: int = 30) -> ExtensionField:
    """Critical point of (c/2) a(V, V) + int F(V(., 0)) with V = E_u on the lateral and top faces.

    Starts from the Poisson extension of u; the trace is free.  The result
    is the discrete counterpart of E_u for comparisons of extended energies.
    """
    nl = nl or make_cubic_nonlinearity()
    E = extend(u, s, R, zmesh)
    A = weighted_stiffness(E.base.shape, E.base.spacing, E.znodes, E.a)
    fixed = E.boundary_mask().ravel()
    x = E.nodal.ravel().copy()
    shape = E.nodal.shape
    w = np.zeros(shape)
    w[..., 0] = _trace_weights(E.base)
    w = w.ravel()
    tr = np.zeros(shape, bool)
    tr[..., 0] = True
    tr = tr.ravel()
    F = make_potential(nl)

    def energy(v):
        return 0.5 * constant * float(v @ (A @ v)) + float(np.sum(w[tr] * F(v[tr])))

    def grad(v):
        g = constant * (A @ v)
        g[tr] -= w[tr] * nl.f(v[tr])
        return g

    free = ~fixed
    for it in range(max_newton):
        g = grad(x)
        gn = float(np.max(np.abs(g[free])))
        if gn <= tol:
            break
        d = np.zeros_like(x)
        d[tr] = -w[tr] * nl.f_prime(x[tr])
        H = (constant * A + sparse.diags(d)).tocsr()[free][:, free]
        P = (constant * A + sparse.diags(np.maximum(d, 0.0))).tocsr()[free][:, free]
        ml = pyamg.smoothed_aggregation_solver(P.tocsr(), max_coarse=200)
        sol, _ = cg(H, -g[free], rtol=1e-10, atol=0.0, maxiter=4000, M=ml.aspreconditioner())
        step = np.zeros_like(x)
        step[free] = sol
        e0 = energy(x)
        t = 1.0
        while t > 1e-6 and energy(x + t * step) > e0 + 1e-14 * abs(e0):
            t *= 0.5
        x = x + t * step
    else:
        raise RuntimeError(f"extended minimizer did not converge (gradient {gn:.2e})")
    out = E.like(x.reshape(shape), u.tail)
    out.info.update({"newton_steps": it, "gradient": gn, "energy": energy(x)})
    return out


@dataclass
class GluedCompetitor:
    alpha: ExtensionField
    beta: ExtensionField
    gamma: ExtensionField
    regions: dict  # node masks: region1, region2, middle
    ledger: list  # rows (region, field, energy, bound, slack)
    passed: bool

    def csv(self) -> CsvBlock:
        b = CsvBlock("glue_ledger", ("region", "field", "energy", "bound", "slack"))
        for r in self.ledger:
            b.add(*r)
        return b


def _as_nodal(F, like: ExtensionField) -> np.ndarray:
    arr = F.nodal if isinstance(F, ExtensionField) else np.asarray(F, dtype=float)
    if arr.shape != like.nodal.shape:
        raise ContractError("all fields must live on the same mesh")
    return arr


def glue_competitors(E_u: ExtensionField, Psi, E_under_star, E_over_star, constant: float,
                     nl: Optional[Nonlinearity] = None, slack: float = 1e-8) -> GluedCompetitor:
    """Clamp W = E_u + Psi against the profile extensions and check the energy chain.

    The local energy is (c/2) int z^a |grad V|^2 + int F(V(., 0)).  Kinetic
    parts are split by region at quadrature points and potential parts at
    trace nodes, so on each region the glued field and W carry identical
    densities.
    """
    nl = nl or make_cubic_nonlinearity()
    F = make_potential(nl)
    U = E_u.nodal
    P = _as_nodal(Psi, E_u)
    if np.max(np.abs(P[E_u.boundary_mask()])) > 0:
        raise ContractError("Psi must vanish on the lateral and top faces")
    lo = _as_nodal(E_under_star, E_u)
    hi = _as_nodal(E_over_star, E_u)
    if np.any(lo > hi):
        raise ValueError("the under-profile extension exceeds the over-profile extension")
    W = U + P
    h, zn, a = E_u.base.spacing, E_u.znodes, E_u.a
    q = {}
    for key, arr in (("W", W), ("U", U), ("lo", lo), ("hi", hi)):
        vals, g, wts = quadrature_sample(arr, h, zn, a)
        q[key] = (vals, 0.5 * constant * wts * np.sum(g ** 2, axis=0))
    tw = _trace_weights(E_u.base)
    pot = {k: tw * F(arr[..., 0]) for k, arr in (("W", W), ("U", U), ("lo", lo), ("hi", hi))}
    r1q = q["W"][0] > q["hi"][0]
    r2q = q["W"][0] < q["lo"][0]
    mq = ~(r1q | r2q)
    r1n = W[..., 0] > hi[..., 0]
    r2n = W[..., 0] < lo[..., 0]
    mn = ~(r1n | r2n)

    def en(key, kin_mask, pot_mask):
        return float(np.sum(q[key][1][kin_mask]) + np.sum(pot[key][pot_mask]))

    E1_alpha, E1_hi = en("W", r1q, r1n), en("hi", r1q, r1n)
    E2_gamma, E2_lo = en("W", r2q, r2n), en("lo", r2q, r2n)
    Em_beta = en("W", mq, mn)
    E_beta = Em_beta + E1_hi + E2_lo
    E_W = float(np.sum(q["W"][1]) + np.sum(pot["W"]))
    E_U = float(np.sum(q["U"][1]) + np.sum(pot["U"]))
    parts = E1_alpha + E2_gamma + Em_beta
    ledger = [
        ("region1", "alpha", E1_alpha, E1_hi, E1_alpha - E1_hi),
        ("region2", "gamma", E2_gamma, E2_lo, E2_gamma - E2_lo),
        ("box", "beta", E_beta, E_U, E_beta - E_U),
        ("box", "regions_sum", parts, E_W, parts - E_W),
        ("box", "total", E_W, E_U, E_W - E_U),
    ]
    scale = max(1.0, abs(E_W))
    ok = all(r[4] >= -slack for r in ledger if r[1] != "regions_sum")
    ok = ok and abs(ledger[3][4]) <= 1e-10 * scale
    alpha = E_u.like(np.maximum(W, hi))
    gamma = E_u.like(np.minimum(W, lo))
    beta = E_u.like(np.clip(W, lo, hi))
    regions = {"region1": W > hi, "region2": W < lo, "middle": (W <= hi) & (W >= lo)}
    return GluedCompetitor(alpha, beta, gamma, regions, ledger, bool(ok))


def random_glue_perturbation(E: ExtensionField, rng, n_bumps: int = 3, amplitude: float = 1.5) -> np.ndarray:
    """Sum of radial bumps in (x, z), supported away from the lateral and top faces."""
    X = E.base.coords()
    zn = E.znodes
    R = E.R
    out = np.zeros(E.nodal.shape)
    n = E.dim
    for _ in range(n_bumps):
        r = rng.uniform(0.1 * R, 0.4 * R)
        c = rng.uniform(-(0.95 * R - r), 0.95 * R - r, size=n)
        zc = rng.uniform(0.0, 0.9 * R - r)
        Xg = [x[..., None] - ci for x, ci in zip(X, c)] + [zn - zc]
        out += rng.uniform(-amplitude, amplitude) * standard_bump(Xg, radius=r)
    out[E.boundary_mask()] = 0.0
    return out


# --------------------------------------------------------------------------
# blow-down and 1D fits


def evaluate_with_tail(u: GridFunction, pts: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of u at points (..., n), using the tail outside the box."""
    pts = np.asarray(pts, dtype=float)
    axes = [u.axis_coords(d) for d in range(u.dim)]
    lo = np.array([a[0] for a in axes])
    hi = np.array([a[-1] for a in axes])
    clamped = np.clip(pts, lo, hi)
    interp = RegularGridInterpolator(axes, u.values)
    out = interp(clamped.reshape(-1, u.dim)).reshape(pts.shape[:-1])
    t = u.tail
    outside = np.any((pts < lo - 1e-12) | (pts > hi + 1e-12), axis=-1)
    if t.kind == "constant":
        out = np.where(outside, t.value, out)
    elif t.kind == "pm1":
        ax = t.axis % u.dim
        out = np.where(pts[..., ax] > hi[ax], t.direction, out)
        out = np.where(pts[..., ax] < lo[ax], -t.direction, out)
    elif t.kind == "periodic":
        span = hi - lo + u.spacing
        wrapped = lo + np.mod(pts - lo, span)
        out = interp(np.clip(wrapped, lo, hi).reshape(-1, u.dim)).reshape(pts.shape[:-1])
    return out


def _unit(theta_deg):
    t = np.deg2rad(theta_deg)
    return np.array([np.cos(t), np.sin(t)])


def _best_step(t, u, w):
    """min over c of sum w |u - sign(t - c)| (exact over all breakpoints); (value, c)."""
    order = np.argsort(t, kind="stable")
    ts, us, ws = t[order], u[order], w[order]
    below = np.concatenate([[0.0], np.cumsum(ws * np.abs(us + 1))])  # first k samples at -1
    above = np.concatenate([np.cumsum((ws * np.abs(us - 1))[::-1])[::-1], [0.0]])
    cost = below + above
    k = int(np.argmin(cost))
    if k == 0:
        c = ts[0] - 1.0
    elif k == ts.size:
        c = ts[-1] + 1.0
    else:
        c = 0.5 * (ts[k - 1] + ts[k])
    return float(cost[k]), c


def _golden(fun, a, b, tol=1e-4):
    res = optimize.minimize_scalar(fun, bounds=(a, b), method="bounded", options={"xatol": tol})
    return float(res.x), float(res.fun)


@dataclass
class BlowdownTable:
    rows: list  # (eps, l1, angle_deg, offset, levelset_dev)
    omega: list

    def csv(self) -> CsvBlock:
        b = CsvBlock("blowdown", ("eps", "l1_distance", "angle_deg", "offset", "levelset_dev"))
        for r in self.rows:
            b.add(*r)
        return b

    @property
    def distances(self):
        return np.array([r[1] for r in self.rows])


def _levelset_points(U, axes):
    """Zero crossings of U along grid lines (linear interpolation)."""
    pts = []
    n = U.ndim
    for d in range(n):
        a = np.moveaxis(U, d, -1)
        s0, s1 = a[..., :-1], a[..., 1:]
        idx = np.nonzero(s0 * s1 < 0)
        if not idx[0].size:
            continue
        frac = s0[idx] / (s0[idx] - s1[idx])
        other = [dd for dd in range(n) if dd != d]
        P = np.empty((frac.size, n))
        for j, dd in enumerate(other):
            P[:, dd] = axes[dd][idx[j]]
        P[:, d] = axes[d][idx[-1]] + frac * (axes[d][1] - axes[d][0])
        pts.append(P)
    return np.concatenate(pts) if pts else np.empty((0, n))


def blowdown(u: GridFunction, eps_list: Sequence[float] = (1.0, 0.5, 0.25, 0.125), window: float = 1.0,
             samples: int = 201) -> BlowdownTable:
    """L1 distance of u_eps = u(./eps) to the best step sign(omega . x - c) on [-window, window]^n."""
    n = u.dim
    g = np.linspace(-window, window, samples)
    axes = [g] * n
    Xs = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    dx = g[1] - g[0]
    w = np.full(Xs.shape[:-1], dx ** n)
    rows, omegas = [], []
    for e in eps_list:
        U = evaluate_with_tail(u, Xs / e)
        uf, wf = U.ravel(), w.ravel()
        if n == 1:
            best = min((_best_step(sgn * Xs[..., 0].ravel(), uf, wf) + (sgn,) for sgn in (1.0, -1.0)),
                       key=lambda r: r[0])
            l1, c, sgn = best
            omega = np.array([sgn])
            angle = 0.0 if sgn > 0 else 180.0
        elif n == 2:
            P = Xs.reshape(-1, 2)
            obj = lambda th: _best_step(P @ _unit(th), uf, wf)[0]
            grid = np.arange(0.0, 360.0, 1.0)
            vals = [obj(th) for th in grid]
            th0 = grid[int(np.argmin(vals))]
            angle, l1 = _golden(obj, th0 - 1.0, th0 + 1.0)
            angle = float(np.mod(angle, 360.0))
            omega = _unit(angle)
            l1, c = _best_step(P @ omega, uf, wf)
        else:
            P = Xs.reshape(-1, n)
            sph = lambda v: np.array([np.sin(v[0]) * np.cos(v[1]), np.sin(v[0]) * np.sin(v[1]), np.cos(v[0])])
            obj = lambda v: _best_step(P @ sph(v), uf, wf)[0]
            starts = [(t, p) for t in np.deg2rad(np.arange(5, 180, 10)) for p in np.deg2rad(np.arange(0, 360, 20))]
            v0 = min(starts, key=obj)
            res = optimize.minimize(obj, v0, method="Nelder-Mead", options={"xatol": 1e-5, "fatol": 1e-12})
            omega = sph(res.x)
            l1, c = _best_step(P @ omega, uf, wf)
            angle = float(np.rad2deg(np.arccos(np.clip(omega[-1], -1, 1))))
        lp = _levelset_points(U, axes)
        dev = float(np.max(np.abs(lp @ omega - c))) if lp.size else 0.0
        rows.append((float(e), float(l1), float(angle), float(c), dev))
        omegas.append(omega)
    return BlowdownTable(rows, omegas)


@dataclass
class Fit1D:
    omega: np.ndarray
    profile: GridFunction
    residual: float
    angle_deg: float

    def csv(self) -> CsvBlock:
        b = CsvBlock("fit1d", ("angle_deg", "residual") + tuple(f"omega{d}" for d in range(self.omega.size)))
        b.add(self.angle_deg, self.residual, *[float(o) for o in self.omega])
        return b


def _bin_stats(t, u, width):
    k = np.floor(t / width).astype(np.int64)
    k -= k.min()
    cnt = np.bincount(k)
    su = np.bincount(k, u)
    st = np.bincount(k, t)
    suu = np.bincount(k, u * u)
    nz = cnt > 0
    return cnt[nz], su[nz] / cnt[nz], st[nz] / cnt[nz], suu[nz] - su[nz] ** 2 / cnt[nz]


def _level_variance(P, u, omega, width):
    _, _, _, ss = _bin_stats(P @ omega, u, width)
    return float(ss.sum())


def fit_1d(u: GridFunction, region=None, angle_step: float = 1.0, bin_frac: float = 0.125) -> Fit1D:
    """Best direction omega for u ~ profile(omega . x), its plane-averaged profile and sup residual.

    ``region`` is an optional boolean mask of the nodes used.
    """
    n = u.dim
    if n not in (2, 3):
        raise ContractError("fit_1d expects n = 2 or 3")
    h = u.spacing
    mask = np.ones(u.shape, bool) if region is None else np.asarray(region, bool)
    P = np.stack([x[mask] for x in u.coords()], axis=-1)
    uv = u.values[mask]
    coarse = 0.5 * h
    if n == 2:
        obj = lambda th: _level_variance(P, uv, _unit(th), coarse)
        grid = np.arange(0.0, 180.0, angle_step)
        th0 = grid[int(np.argmin([obj(t) for t in grid]))]
        angle, _ = _golden(obj, th0 - angle_step, th0 + angle_step, tol=1e-5)
        omega = _unit(angle)
    else:
        sph = lambda v: np.array([np.sin(v[0]) * np.cos(v[1]), np.sin(v[0]) * np.sin(v[1]), np.cos(v[0])])
        obj = lambda v: _level_variance(P, uv, sph(v), coarse)
        starts = [(t, p) for t in np.deg2rad(np.arange(5, 91, 10)) for p in np.deg2rad(np.arange(0, 360, 10))]
        v0 = min(starts, key=obj)
        res = optimize.minimize(obj, v0, method="Nelder-Mead", options={"xatol": 1e-6, "fatol": 1e-14})
        omega = sph(res.x)
        angle = float(np.rad2deg(np.arccos(np.clip(omega[-1], -1, 1))))
    t = P @ omega
    _, ub, tb, _ = _bin_stats(t, uv, bin_frac * h)
    resid = float(np.max(np.abs(uv - np.interp(t, tb, ub))))
    tg = np.arange(np.floor(t.min() / h), np.ceil(t.max() / h) + 1) * h
    prof = GridFunction(np.interp(tg, tb, ub), h, (tg[0],), TailModel.edge())
    return Fit1D(omega, prof, resid, float(angle))
