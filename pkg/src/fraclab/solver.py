"""Layer solutions in 1D, monotone solutions on 2D boxes, and their limits.

The 1D layer is relaxed by an explicit gradient flow from ``tanh`` and then
polished by Newton's method on the dense Jacobian.  2D solves freeze a thick
frame of prescribed data around the box and run Newton-Krylov on the free
nodes.  Both use the same discrete operator as the energies, so a returned
residual is the residual of the discrete equation that everything else sees.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import optimize
from scipy.sparse.linalg import LinearOperator, minres

from .fracop import ContractError, GridFunction, TailModel, get_stencil
from .model import Nonlinearity

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """The iteration did not reach its tolerance."""

    def __init__(self, msg, history=None):
        super().__init__(msg)
        self.history = list(history or [])


class MonotonicityError(AssertionError):
    """A solution that should be monotone is not."""

    def __init__(self, msg, min_slope):
        super().__init__(msg)
        self.min_slope = min_slope


class InconclusiveError(ValueError):
    """A limit could not be identified within the declared tolerance."""


def _is_odd(nl: Nonlinearity) -> bool:
    t = np.linspace(0.0, 1.5, 31)
    return bool(np.allclose(nl.f(-t), -nl.f(t), atol=1e-13, rtol=0))


# --------------------------------------------------------------------------
# 1D layers


@dataclass
class LayerSolution:
    grid: GridFunction
    s: float
    residual_norm: float
    monotone: bool
    min_slope: float
    mismatch: float
    history: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    @property
    def x(self):
        return self.grid.axis_coords(0)

    @property
    def values(self):
        return self.grid.values

    def __call__(self, t):
        """Linear interpolation, clamped to the end values outside the box."""
        return np.interp(t, self.x, self.values)

    def shifted(self, k: int) -> "LayerSolution":
        """The layer translated by ``k`` cells; vacated nodes take the edge value."""
        v = np.roll(self.values, k)
        if k > 0:
            v[:k] = self.values[0]
        elif k < 0:
            v[k:] = self.values[-1]
        return LayerSolution(self.grid.with_values(v), self.s, np.nan, self.monotone,
                             self.min_slope, self.mismatch, [], dict(self.info))


def layer_residual(values, s: float, nl: Nonlinearity, h: float, tail: Optional[TailModel] = None):
    """(-Delta)^s u - f(u) on a 1D grid with a +-1 tail."""
    tail = tail or TailModel.constant_pm1(axis=0)
    L = get_stencil((len(values),), h, s, "pm1", 0)
    return L.apply(values, tail) - nl.f(values)


def _dense_operator(L, tail):
    """Matrix of the linear part v -> L(v) - L(0) for a 1D stencil."""
    N = L.shape[0]
    base = L.apply(np.zeros(N), tail)
    A = np.empty((N, N))
    e = np.zeros(N)
    for i in range(N):
        e[i] = 1.0
        A[:, i] = L.apply(e, tail) - base
        e[i] = 0.0
    return A, -base


def flow_steps(u, s: float, nl: Nonlinearity, h: float, steps: int, tau: Optional[float] = None,
               enforce_odd: bool = True):
    """``steps`` explicit flow steps u <- u + tau (f(u) - (-Delta)^s u)."""
    tail = TailModel.constant_pm1(axis=0)
    L = get_stencil((len(u),), h, s, "pm1", 0)
    if tau is None:
        tau = 0.5 / (L.lambda_max() + float(np.max(np.abs(nl.f_prime(np.linspace(-1, 1, 201))))))
    u = np.array(u, dtype=float)
    for _ in range(steps):
        u = u + tau * (nl.f(u) - L.apply(u, tail))
        if enforce_odd:
            u = 0.5 * (u - u[::-1])
    return u


def solve_layer(nl: Nonlinearity, s: float, X_max: float = 40.0, N: int = 801, tol: float = 1e-4,
                max_flow: int = 20000, switch: float = 1e-2, newton_tol: Optional[float] = None,
                max_newton: int = 30, enforce_odd: Optional[bool] = None,
                mismatch_bound: float = 0.1) -> LayerSolution:
    """Monotone layer of (-Delta)^s u = f(u) on [-X_max, X_max] with u = -+1 beyond.

    The flow runs until the sup residual drops below ``switch`` (or ``tol``,
    whichever is larger); Newton then drives it to ``newton_tol``
    (default ``tol * 1e-4``).
    """
    if not 0.0 < s < 1.0:
        raise ContractError("s must lie in (0, 1)")
    if N % 2 == 0:
        raise ContractError("N must be odd so that the grid contains 0")
    x = np.linspace(-X_max, X_max, N)
    h = x[1] - x[0]
    tail = TailModel.constant_pm1(axis=0, mismatch_bound=mismatch_bound)
    L = get_stencil((N,), h, s, "pm1", 0)
    odd = _is_odd(nl) if enforce_odd is None else enforce_odd
    lam = L.lambda_max()
    fmax = float(np.max(np.abs(nl.f_prime(np.linspace(-1, 1, 201)))))
    tau = 0.5 / (lam + fmax)
    newton_tol = tol * 1e-4 if newton_tol is None else newton_tol

    def resid(u):
        return L.apply(u, tail) - nl.f(u)

    u = np.tanh(x)
    history = []
    target = max(switch, tol)
    for it in range(max_flow):
        r = resid(u)
        rn = float(np.max(np.abs(r)))
        if it % 50 == 0:
            history.append(("flow", it, rn))
        if rn <= target:
            break
        u = u - tau * r
        if odd:
            u = 0.5 * (u - u[::-1])
        if np.any(np.diff(u) <= 0):
            raise MonotonicityError(f"flow lost monotonicity at step {it}; step size too large",
                                    float(np.min(np.diff(u)) / h))
    else:
        raise SolverError(f"flow did not reach residual {target:g} in {max_flow} steps", history)
    history.append(("flow", it, rn))

    A, g = _dense_operator(L, tail)
    for k in range(max_newton):
        r = A @ u - g - nl.f(u)
        rn = float(np.max(np.abs(r)))
        history.append(("newton", k, rn))
        if rn <= newton_tol:
            break
        J = A - np.diag(nl.f_prime(u))
        du = np.linalg.solve(J, -r)
        lam_ls = 1.0
        while lam_ls > 1e-4:
            un = u + lam_ls * du
            if odd:
                un = 0.5 * (un - un[::-1])
            if np.max(np.abs(A @ un - g - nl.f(un))) < rn:
                break
            lam_ls *= 0.5
        u = un
    rn = float(np.max(np.abs(resid(u))))
    if rn > tol:
        raise SolverError(f"layer residual {rn:.3e} above tolerance {tol:g}", history)
    slope = np.diff(u) / h
    min_slope = float(slope.min())
    if min_slope <= 0:
        raise MonotonicityError("layer is not strictly increasing", min_slope)
    grid = GridFunction(u, h, (x[0],), tail, info={"kind": "layer"})
    mismatch = grid.tail_mismatch()
    if mismatch > mismatch_bound:
        raise MonotonicityError(f"end values miss +-1 by {mismatch:.3g} > {mismatch_bound}", min_slope)
    info = {"tau": tau, "lambda_max": lam, "flow_steps": it, "odd_enforced": odd,
            "tail_bias_estimate": mismatch * X_max ** (-2 * s)}
    log.info("layer s=%g: residual %.2e after %d flow steps", s, rn, it)
    return LayerSolution(grid, s, rn, True, min_slope, mismatch, history, info)


# --------------------------------------------------------------------------
# limits


def _real_roots(nl: Nonlinearity, lo=-1.5, hi=1.5):
    if nl.coeffs is not None:
        r = np.roots(list(nl.coeffs)[::-1])
        r = r[np.abs(r.imag) < 1e-9].real
        return np.sort(r[(r >= lo) & (r <= hi)])
    t = np.linspace(lo, hi, 3001)
    ft = nl.f(t)
    roots = list(t[ft == 0])
    for a, b, fa, fb in zip(t[:-1], t[1:], ft[:-1], ft[1:]):
        if fa * fb < 0:
            roots.append(optimize.brentq(nl.f, a, b))
    return np.unique(np.round(roots, 12))


@dataclass
class Limits:
    minus: float
    plus: float
    raw_minus: float
    raw_plus: float
    snap_distance: float

    def __iter__(self):
        return iter((self.minus, self.plus))


def _end_fit(x, u, s):
    """Least squares u ~ l + C |x|^(-2s) over the given samples; returns l."""
    t = np.abs(x) ** (-2 * s)
    A = np.stack([np.ones_like(t), t], axis=1)
    coef, *_ = np.linalg.lstsq(A, u, rcond=None)
    return float(coef[0])


def limit_trichotomy(u, nl: Nonlinearity, s: Optional[float] = None, outer: float = 0.5,
                     snap_tol: float = 0.05) -> Limits:
    """Limits of a bounded monotone 1D profile at -+infinity, snapped to zeros of f.

    The outer fraction ``outer`` of each half-line is fitted with an
    algebraic tail l + C|x|^(-2s).
    """
    if isinstance(u, LayerSolution):
        s = u.s if s is None else s
        u = u.grid
    if s is None:
        raise ContractError("s is needed to model the algebraic tail")
    if u.dim != 1:
        raise ContractError("limit_trichotomy expects a 1D profile")
    x = u.axis_coords(0)
    v = u.values
    X = min(abs(x[0]), abs(x[-1]))
    lo_sel = x <= -(1 - outer) * X
    hi_sel = x >= (1 - outer) * X
    if np.ptp(v) == 0:
        raw_m = raw_p = float(v[0])
    else:
        raw_m = _end_fit(x[lo_sel], v[lo_sel], s)
        raw_p = _end_fit(x[hi_sel], v[hi_sel], s)
    roots = _real_roots(nl)
    if roots.size == 0:
        raise InconclusiveError("f has no real zeros near [-1, 1]")
    snapped = [float(roots[np.argmin(np.abs(roots - r))]) for r in (raw_m, raw_p)]
    dist = max(abs(snapped[0] - raw_m), abs(snapped[1] - raw_p))
    if dist > snap_tol:
        raise InconclusiveError(f"fitted limits ({raw_m:.4f}, {raw_p:.4f}) are {dist:.3g} from the nearest zeros of f")
    return Limits(snapped[0], snapped[1], raw_m, raw_p, dist)


# --------------------------------------------------------------------------
# 2D monotone solutions


@dataclass
class BoundaryData:
    """Prescribed values on the frozen frame plus the declared profiles at x_2 -> -+inf."""

    values: Callable  # (X1, X2) -> array
    under: Callable  # x1 -> array
    over: Callable
    name: str = "custom"
    # +-1 beyond the box along x_2 is only consistent when the data is a layer
    # in x_2 solved on the same interval; otherwise the edge values are extended
    pm1_tail: bool = False

    def tail(self) -> TailModel:
        return TailModel.constant_pm1(axis=1) if self.pm1_tail else TailModel.edge()

    def tabulate(self, box, h: float) -> GridFunction:
        """The data itself on [-L1, L1] x [-L2, L2], as a grid function with this tail."""
        L1, L2 = box
        x1 = np.arange(-round(L1 / h), round(L1 / h) + 1) * h
        x2 = np.arange(-round(L2 / h), round(L2 / h) + 1) * h
        X1, X2 = np.meshgrid(x1, x2, indexing="ij")
        return GridFunction(np.asarray(self.values(X1, X2), dtype=float), h, (x1[0], x2[0]), self.tail(),
                            info={"kind": "boundary_data", "scenario": self.name})


def tensor_layer_data(layer: LayerSolution) -> BoundaryData:
    """u_o(x_2); solve on the layer's own x_2 interval for a consistent +-1 tail."""
    return BoundaryData(lambda X1, X2: layer(X2), lambda x1: -np.ones_like(x1),
                        lambda x1: np.ones_like(x1), "tensor_layer", True)


def rotated_layer_data(layer: LayerSolution, angle_deg: float = 10.0) -> BoundaryData:
    """u_o(sin(a) x_1 + cos(a) x_2)."""
    a = np.deg2rad(angle_deg)
    return BoundaryData(lambda X1, X2: layer(np.sin(a) * X1 + np.cos(a) * X2),
                        lambda x1: -np.ones_like(x1), lambda x1: np.ones_like(x1),
                        f"rotated_layer_{angle_deg:g}")


def two_profile_data(layer: LayerSolution, width: float = 1.0) -> BoundaryData:
    """Bottom profile u_o(x_1), top profile +1, joined by a logistic in x_2."""

    def vals(X1, X2):
        lo = layer(X1)
        sig = 0.5 * (1 + np.tanh(X2 / width))
        return lo + (1 - lo) * sig

    return BoundaryData(vals, lambda x1: layer(x1), lambda x1: np.ones_like(x1), "two_profile", False)


def solve_monotone_2d(nl: Nonlinearity, s: float, box, boundary_data: BoundaryData, tol: float = 1e-6,
                      h: float = 0.25, frame: int = 8, max_newton: int = 30, krylov_tol: float = 1e-3,
                      require_monotone: bool = True) -> GridFunction:
    """Monotone (in x_2) solution on [-L1, L1] x [-L2, L2] with a frozen frame.

    ``frame`` layers of nodes on each side keep the prescribed data; the
    tail beyond the box is +-1 along x_2 when both declared profiles are
    constant and the edge values otherwise.  Newton steps are solved by
    MINRES with a Jacobi preconditioner.
    """
    L1, L2 = box
    x1 = np.arange(-round(L1 / h), round(L1 / h) + 1) * h
    x2 = np.arange(-round(L2 / h), round(L2 / h) + 1) * h
    X1, X2 = np.meshgrid(x1, x2, indexing="ij")
    u = np.asarray(boundary_data.values(X1, X2), dtype=float).copy()
    tail = boundary_data.tail()
    kind = tail.kind
    L = get_stencil(u.shape, h, s, kind, 1 if kind == "pm1" else -1)
    free = np.zeros(u.shape, dtype=bool)
    free[frame:-frame, frame:-frame] = True
    if not free.any():
        raise ContractError("frame leaves no free nodes")
    diag = L.diagonal()[free]

    def resid(v):
        return (L.apply(v, tail) - nl.f(v))[free]

    history = []
    r = resid(u)
    for k in range(max_newton):
        rn = float(np.max(np.abs(r)))
        history.append(rn)
        if rn <= tol:
            break
        fp = nl.f_prime(u[free])

        def mv(w):
            full = np.zeros(u.shape)
            full[free] = w
            return L.apply_zero(full)[free] - fp * w

        n_free = int(free.sum())
        J = LinearOperator((n_free, n_free), matvec=mv, dtype=float)
        M = LinearOperator((n_free, n_free), matvec=lambda w: w / np.maximum(diag - fp, 1e-8 * diag),
                           dtype=float)
        du, _ = minres(J, -r, M=M, rtol=krylov_tol, maxiter=500)
        step = 1.0
        while step > 1e-4:
            un = u.copy()
            un[free] += step * du
            rn_new = resid(un)
            if np.max(np.abs(rn_new)) < rn:
                break
            step *= 0.5
        u, r = un, rn_new
    else:
        raise SolverError(f"2D Newton stalled at residual {history[-1]:.3e}", history)
    # strict increase wherever a free node is involved; the frozen data may saturate
    d2 = np.diff(u, axis=1) / h
    touches = free[:, 1:] | free[:, :-1]
    min_slope = float(d2[touches].min())
    if d2.min() < 0:
        min_slope = min(min_slope, float(d2.min()))
    grid = GridFunction(u, h, (x1[0], x2[0]), tail,
                        info={"kind": "monotone_2d", "scenario": boundary_data.name, "frame": frame,
                              "residual": history[-1], "history": history, "min_slope": min_slope,
                              "free": free})
    grid.info["boundary_data"] = boundary_data
    if require_monotone and min_slope <= 0:
        raise MonotonicityError(f"2D solution not increasing in x_2 (min slope {min_slope:.3e})", min_slope)
    log.info("2D %s: residual %.2e, min slope %.3e", boundary_data.name, history[-1], min_slope)
    return grid


@dataclass
class Profiles:
    under: GridFunction
    over: GridFunction
    disagreement: float

    def __iter__(self):
        return iter((self.under, self.over))


def profiles_at_infinity(u: GridFunction, s: float, outer: float = 0.5, declared=None,
                         tol: float = 0.05) -> Profiles:
    """Bottom and top profiles in x' from rows fitted by a + b |x_n|^(-2s).

    ``declared`` is a pair of callables (under, over) of x'; it defaults to
    the profiles attached to a solution from :func:`solve_monotone_2d`.
    """
    if u.dim != 2:
        raise ContractError("profiles_at_infinity expects a 2D grid")
    x1 = u.axis_coords(0)
    x2 = u.axis_coords(1)
    X = min(abs(x2[0]), abs(x2[-1]))
    lo_sel = x2 <= -(1 - outer) * X
    hi_sel = x2 >= (1 - outer) * X

    def fit(sel):
        t = np.abs(x2[sel]) ** (-2 * s)
        A = np.stack([np.ones_like(t), t], axis=1)
        coef, *_ = np.linalg.lstsq(A, u.values[:, sel].T, rcond=None)
        return coef[0]

    under = fit(lo_sel)
    over = fit(hi_sel)
    if declared is None and "boundary_data" in u.info:
        bd = u.info["boundary_data"]
        declared = (bd.under, bd.over)
    dis = 0.0
    if declared is not None:
        dis = max(float(np.max(np.abs(under - declared[0](x1)))),
                  float(np.max(np.abs(over - declared[1](x1)))))
        if dis > tol:
            raise InconclusiveError(f"extrapolated profiles differ from the declared ones by {dis:.3g}")
    if np.any(under > over):
        raise InconclusiveError("extrapolated under-profile exceeds the over-profile")
    mk = lambda v: GridFunction(v, u.spacing, (x1[0],), TailModel.edge())
    return Profiles(mk(under), mk(over), dis)
