"""Poisson kernel of order s, a-harmonic extensions and weighted Dirichlet energies.

Extensions live on tensor meshes: the x-nodes of the trace grid inside
[-R, R]^n times a z-mesh graded toward z = 0.  Energies treat the nodal
values as a Q1 finite-element field and integrate z^a |grad U|^2 with a
two-point Gauss rule in each x direction and a two-point rule for the
weight z^a in z, built from its exact moments.  That rule is exact for Q1
fields, and evaluating at quadrature points makes the energy of pointwise
max/min combinations of fields split exactly over regions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import mpmath
import numpy as np
from scipy import fft as sfft
from scipy import integrate, sparse, special

from . import _kernels as K
from .fracop import ContractError, GridFunction, TailModel


# --------------------------------------------------------------------------
# kernel


@dataclass(frozen=True)
class PoissonKernel:
    n: int
    s: float
    a: float
    cbar: float

    @property
    def p(self) -> float:
        return 0.5 * (self.n + 2 * self.s)

    def __call__(self, x, z):
        return poisson_eval(self, x, z)


def _radial_mass(n: int, p: float, z: float = 1.0) -> float:
    """int_{R^n} (|x|^2 + z^2)^{-p} dx by radial quadrature."""
    area = 2.0 if n == 1 else 2 * np.pi if n == 2 else 4 * np.pi
    f = lambda r: r ** (n - 1) * (r * r + z * z) ** (-p)
    a, _ = integrate.quad(f, 0, z, epsabs=0, epsrel=1e-13, limit=200)
    b, _ = integrate.quad(f, z, np.inf, epsabs=0, epsrel=1e-13, limit=200)
    return area * (a + b)


@lru_cache(maxsize=None)
def make_poisson_kernel(n: int, s: float) -> PoissonKernel:
    """Kernel with cbar fixed by numerically normalizing at z = 1."""
    if not 0 < s < 1:
        raise ValueError("s must lie in (0, 1)")
    if n not in (1, 2, 3):
        raise ValueError("n must be 1, 2 or 3")
    p = 0.5 * (n + 2 * s)
    cbar = 1.0 / _radial_mass(n, p, 1.0)
    return PoissonKernel(int(n), float(s), 1.0 - 2.0 * s, cbar)


def poisson_eval(k: PoissonKernel, x, z):
    """cbar z^{2s} / (|x|^2 + z^2)^{(n+2s)/2}."""
    z = np.asarray(z, dtype=float)
    if np.any(z <= 0):
        raise ValueError("z must be positive")
    x = np.asarray(x, dtype=float)
    r2 = np.sum(x * x, axis=-1) if x.ndim and x.shape[-1] == k.n else x * x
    return k.cbar * z ** (2 * k.s) * (r2 + z * z) ** (-k.p)


def poisson_mass(k: PoissonKernel, z: float) -> float:
    """Numerical int_{R^n} P(x, z) dx (should be 1)."""
    if z <= 0:
        raise ValueError("z must be positive")
    return k.cbar * z ** (2 * k.s) * _radial_mass(k.n, k.p, z)


# --------------------------------------------------------------------------
# meshes and fields


def graded_zmesh(R: float, M: int, s: float) -> np.ndarray:
    """z_j = R (j/M)^q, j = 1..M, with q = max(3, 1.5/s).

    Nodes cluster toward z = 0, where the extension behaves like
    v + c z^{2s}; the exponent was tuned against a discrete a-harmonic
    solve on the same mesh.
    """
    q = max(3.0, 1.5 / s)
    j = np.arange(1, M + 1)
    return R * (j / M) ** q


@dataclass
class ExtensionField:
    """Nodal values on (x-nodes) x zmesh; the z = 0 layer is ``base``."""

    base: GridFunction
    zmesh: np.ndarray
    values: np.ndarray
    R: float
    s: float
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.zmesh = np.asarray(self.zmesh, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if np.any(np.diff(self.zmesh) <= 0) or self.zmesh[0] <= 0:
            raise ContractError("zmesh must be strictly increasing and positive")
        if self.values.shape != self.base.shape + (self.zmesh.size,):
            raise ContractError("values must have shape base.shape + (len(zmesh),)")

    @property
    def a(self) -> float:
        return 1.0 - 2.0 * self.s

    @property
    def znodes(self) -> np.ndarray:
        return np.concatenate([[0.0], self.zmesh])

    @property
    def nodal(self) -> np.ndarray:
        return np.concatenate([self.base.values[..., None], self.values], axis=-1)

    @property
    def dim(self) -> int:
        return self.base.dim

    def like(self, nodal: np.ndarray, tail: Optional[TailModel] = None) -> "ExtensionField":
        """A field on the same mesh from a full nodal array (z = 0 included)."""
        nodal = np.asarray(nodal, dtype=float)
        base = self.base.with_values(nodal[..., 0], tail)
        return ExtensionField(base, self.zmesh.copy(), nodal[..., 1:].copy(), self.R, self.s)

    def boundary_mask(self) -> np.ndarray:
        """Nodes on the lateral faces or the top face (L_R and U_R)."""
        mask = np.zeros(self.nodal.shape, dtype=bool)
        for d in range(self.dim):
            sl = [slice(None)] * (self.dim + 1)
            sl[d] = 0
            mask[tuple(sl)] = True
            sl[d] = -1
            mask[tuple(sl)] = True
        mask[..., -1] = True
        return mask


def _region_slices(v: GridFunction, R: float):
    sl = []
    for d in range(v.dim):
        x = v.axis_coords(d)
        tol = 1e-9 * max(1.0, R)
        if x[0] > -R + tol or x[-1] < R - tol:
            raise ContractError(f"grid does not cover [-R, R] along axis {d}")
        idx = np.nonzero(np.abs(x) <= R + tol)[0]
        sl.append(slice(idx[0], idx[-1] + 1))
    return tuple(sl)


def _resolve_zmesh(zmesh_spec, R, s):
    if zmesh_spec is None:
        return graded_zmesh(R, 48, s)
    if np.isscalar(zmesh_spec):
        return graded_zmesh(R, int(zmesh_spec), s)
    z = np.asarray(zmesh_spec, dtype=float)
    if not np.isclose(z[-1], R):
        raise ContractError("explicit zmesh must end at R")
    return z


def _cell_masses(k: PoissonKernel, h: float, half, z: float) -> np.ndarray:
    """P-masses of the cells at offsets |j_d| <= half[d] from a node, at height z."""
    n, p = k.n, k.p
    axes = [np.arange(-m, m + 1) for m in half]
    J = np.meshgrid(*axes, indexing="ij")
    pref = k.cbar * z ** (2 * k.s)
    if n == 1:
        j = J[0] * h
        return pref * K.line_integral(j - 0.5 * h, j + 0.5 * h, z * z, p)
    centers = np.stack([Jd * h for Jd in J], axis=-1)
    out = np.empty(J[0].shape)
    jinf = np.max(np.abs(np.stack(J)), axis=0)
    exact = jinf <= (8 if z < 4 * h else 0)
    lo = centers[exact] - 0.5 * h
    out[exact] = K.box_integral(lo, lo + h, p, z * z, nq=10)
    out[~exact] = K.cell_weights_gauss(centers[~exact], h, p, bsq=z * z, nq=3)
    return pref * out


def _exterior_1d(k, v, z, lo_edge, hi_edge, x):
    """Masses of (-inf, lo_edge) and (hi_edge, inf) seen from nodes x."""
    pref = k.cbar * z ** (2 * k.s)
    bot = pref * K.line_integral(-np.inf, lo_edge - x, z * z, k.p)
    top = pref * K.line_integral(hi_edge - x, np.inf, z * z, k.p)
    return bot, top


def extend(v: GridFunction, s: float, R: float, zmesh_spec=None) -> ExtensionField:
    """E_v = P(., z) * v on [-R, R]^n x zmesh.

    Inside the sampled box v is piecewise constant on cells; outside, the
    tail model is integrated in closed form (constant tails use the unit
    mass of P so that constants are reproduced to rounding).
    """
    if v.tail.kind == "periodic":
        raise ContractError("periodic traces are extended in Fourier space; use extend_periodic")
    if v.dim not in (1, 2):
        raise ContractError("extension supports n = 1, 2")
    if R <= 0:
        raise ValueError("R must be positive")
    k = make_poisson_kernel(v.dim, s)
    zmesh = _resolve_zmesh(zmesh_spec, R, s)
    region = _region_slices(v, R)
    n, h = v.dim, v.spacing
    shape = v.shape
    half = [N - 1 for N in shape]
    Lfft = tuple(sfft.next_fast_len(3 * N - 2, real=True) for N in shape)
    vhat = sfft.rfftn(v.values, Lfft)
    out = np.empty(v.values[region].shape + (zmesh.size,))
    X = v.coords()
    lo_edge = np.array(v.origin) - 0.5 * h
    hi_edge = v.upper() + 0.5 * h
    for iz, z in enumerate(zmesh):
        A = _cell_masses(k, h, half, z)
        full = sfft.irfftn(sfft.rfftn(A, Lfft) * vhat, Lfft)
        core = full[tuple(slice(N - 1, 2 * N - 1) for N in shape)]
        tail = v.tail
        if tail.kind == "constant":
            mass_in = sfft.irfftn(sfft.rfftn(A, Lfft) * sfft.rfftn(np.ones(shape), Lfft), Lfft)
            mass_in = mass_in[tuple(slice(N - 1, 2 * N - 1) for N in shape)]
            core = core + tail.value * (1.0 - mass_in)
        elif tail.kind == "edge":
            core = core + _edge_exterior_ext(k, v, z, X, lo_edge, hi_edge)
        else:
            core = core + _pm1_exterior_ext(k, v, z, X, lo_edge, hi_edge)
        out[..., iz] = core[region]
    base = GridFunction(v.values[region], h, tuple(np.array(v.origin) + h * np.array([r.start for r in region])),
                        v.tail, dict(v.info))
    return ExtensionField(base, zmesh, out, float(R), float(s), {"cbar": k.cbar})


def _strips_ext(k, v, z, lat):
    """Exterior strips beyond both faces normal to ``lat`` (n = 2), valued by the edge lines."""
    h = v.spacing
    other = 1 - lat
    No, Nl = v.shape[other], v.shape[lat]
    pref = k.cbar * z ** (2 * k.s)
    rows = np.arange(-(No - 1), No) * h
    dist = (np.arange(Nl) + 0.5) * h
    lo = np.empty((Nl, rows.size, 2))
    hi = np.empty_like(lo)
    lo[..., 0], hi[..., 0] = dist[:, None], np.inf
    lo[..., 1], hi[..., 1] = rows[None, :] - 0.5 * h, rows[None, :] + 0.5 * h
    T = pref * K.box_integral(lo, hi, k.p, z * z, nq=6)  # T[distance, row offset]
    left = np.take(v.values, 0, axis=lat)
    right = np.take(v.values, -1, axis=lat)
    L = sfft.next_fast_len(rows.size + No - 1, real=True)
    Th = sfft.rfft(T, L, axis=1)

    def corr(col):
        f = sfft.irfft(Th * sfft.rfft(col, L)[None, :], L, axis=1)
        return f[:, No - 1:2 * No - 1]

    g = corr(left) + corr(right)[::-1]
    return g if lat == 0 else g.T


def _pm1_exterior_ext(k, v, z, X, lo_edge, hi_edge):
    n, h = v.dim, v.spacing
    ax = v.tail.axis % n
    dr = v.tail.direction
    pref = k.cbar * z ** (2 * k.s)
    xa = X[ax]
    if n == 1:
        bot, top = _exterior_1d(k, v, z, lo_edge[0], hi_edge[0], xa)
        return dr * (top - bot)
    # half-planes beyond the box along the monotone axis
    fac = special.beta(0.5, k.p - 0.5)
    top = pref * fac * K.line_integral(hi_edge[ax] - xa, np.inf, z * z, k.p - 0.5)
    bot = pref * fac * K.line_integral(-np.inf, lo_edge[ax] - xa, z * z, k.p - 0.5)
    return dr * (top - bot) + _strips_ext(k, v, z, 1 - ax)


def _edge_exterior_ext(k, v, z, X, lo_edge, hi_edge):
    h = v.spacing
    u = v.values
    if v.dim == 1:
        bot, top = _exterior_1d(k, v, z, lo_edge[0], hi_edge[0], X[0])
        return u[-1] * top + u[0] * bot
    G = _strips_ext(k, v, z, 0) + _strips_ext(k, v, z, 1)
    N0, N1 = v.shape
    lo = np.empty((N0, N1, 2))
    lo[..., 0] = ((np.arange(N0) + 0.5) * h)[:, None]
    lo[..., 1] = ((np.arange(N1) + 0.5) * h)[None, :]
    c = k.cbar * z ** (2 * k.s) * K.box_integral(lo, np.full_like(lo, np.inf), k.p, z * z, nq=16)
    return G + (u[0, 0] * c + u[-1, 0] * c[::-1, :] + u[0, -1] * c[:, ::-1] + u[-1, -1] * c[::-1, ::-1])


def extend_periodic(v: GridFunction, s: float, R: float, zmesh_spec=None) -> ExtensionField:
    """Fourier-space extension: E(k, z) = v_hat(k) theta(|k| z), theta(t) = 2^{1-s} t^s K_s(t)/Gamma(s)."""
    if v.tail.kind != "periodic":
        raise ContractError("extend_periodic needs a periodic trace")
    zmesh = _resolve_zmesh(zmesh_spec, R, s)
    ks = np.meshgrid(*[2 * np.pi * sfft.fftfreq(N, v.spacing) for N in v.shape], indexing="ij")
    kk = np.sqrt(sum(q ** 2 for q in ks))
    vhat = sfft.fftn(v.values)
    out = np.empty(v.shape + (zmesh.size,))
    for iz, z in enumerate(zmesh):
        t = kk * z
        with np.errstate(invalid="ignore", over="ignore"):
            th = 2 ** (1 - s) / special.gamma(s) * t ** s * special.kv(s, t)
        th = np.where(t == 0, 1.0, np.nan_to_num(th, nan=0.0))
        out[..., iz] = np.real(sfft.ifftn(vhat * th))
    return ExtensionField(v, zmesh, out, float(R), float(s))


# --------------------------------------------------------------------------
# weighted quadrature in z


@lru_cache(maxsize=64)
def _z_rule(znodes: tuple, a: float):
    """Per z-cell: local moments m_j = int_0^1 (z0 + D t)^a t^j dt, j = 0..3,
    and a two-point rule (t_q, w_q) exact for cubics against that weight."""
    with mpmath.workdps(40):
        return _z_rule_mp(znodes, a)


def _z_rule_mp(znodes, a):
    z = [mpmath.mpf(repr(q)) for q in znodes]
    A = mpmath.mpf(repr(a))
    M = len(z) - 1
    mom = np.empty((M, 4))
    tq = np.empty((M, 2))
    wq = np.empty((M, 2))
    for e in range(M):
        z0, z1 = z[e], z[e + 1]
        D = z1 - z0
        # int_0^1 (z0 + D t)^a t^j dt via the substitution w = z0 + D t
        ms = []
        for j in range(4):
            tot = mpmath.mpf(0)
            for i in range(j + 1):
                c = mpmath.binomial(j, i) * (-z0) ** (j - i)
                e_ = A + i + 1
                tot += c * (z1 ** e_ - z0 ** e_) / e_
            ms.append(tot / D ** (j + 1))
        # monic orthogonal quadratic t^2 + b t + c
        det = ms[1] * ms[1] - ms[0] * ms[2]
        b = (ms[0] * ms[3] - ms[1] * ms[2]) / det
        c = (ms[2] * ms[2] - ms[1] * ms[3]) / det
        disc = mpmath.sqrt(b * b - 4 * c)
        t1, t2 = (-b - disc) / 2, (-b + disc) / 2
        w2 = (ms[1] - t1 * ms[0]) / (t2 - t1)
        w1 = ms[0] - w2
        mom[e] = [float(q) for q in ms]
        tq[e] = [float(t1), float(t2)]
        wq[e] = [float(w1), float(w2)]
    return mom, tq, wq


_GX = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
_GW = np.array([0.5, 0.5])


def quadrature_sample(nodal: np.ndarray, h: float, znodes: np.ndarray, a: float):
    """Values, gradients and weights of the Q1 interpolant at quadrature points.

    Returns (vals, grads, wts) with vals/wts of shape (*elements, Q) and
    grads of shape (n+1, *elements, Q); wts include z^a and the cell volume.
    """
    nodal = np.asarray(nodal, dtype=float)
    n = nodal.ndim - 1
    _, tq, wq = _z_rule(tuple(float(q) for q in znodes), float(a))
    dz = np.diff(znodes)
    el_shape = tuple(N - 1 for N in nodal.shape)
    corners = list(np.ndindex(*(2,) * (n + 1)))
    Vc = {}
    for o in corners:
        sl = tuple(slice(oi, oi + N) for oi, N in zip(o, el_shape))
        Vc[o] = nodal[sl]
    pts = list(np.ndindex(*(2,) * (n + 1)))
    Q = len(pts)
    vals = np.zeros(el_shape + (Q,))
    grads = np.zeros((n + 1,) + el_shape + (Q,))
    wts = np.zeros(el_shape + (Q,))
    zshape = (1,) * n + (el_shape[-1],)
    for iq, qp in enumerate(pts):
        xi = [_GX[qp[d]] for d in range(n)]
        t = tq[:, qp[n]].reshape(zshape)
        wz = (wq[:, qp[n]] * dz).reshape(zshape)
        w = wz * h ** n * np.prod([_GW[qp[d]] for d in range(n)])
        wts[..., iq] = np.broadcast_to(w, el_shape)
        for o in corners:
            phi = [xi[d] if o[d] else 1 - xi[d] for d in range(n)] + [t if o[n] else 1 - t]
            dphi = [(1 if o[d] else -1) / h for d in range(n)] + [(1 if o[n] else -1) / dz.reshape(zshape)]
            base = Vc[o]
            prod_all = np.ones(zshape)
            for d in range(n + 1):
                prod_all = prod_all * phi[d]
            vals[..., iq] += prod_all * base
            for g in range(n + 1):
                term = dphi[g]
                for d in range(n + 1):
                    if d != g:
                        term = term * phi[d]
                grads[g, ..., iq] += term * base
    return vals, grads, wts


def _select_region(U: ExtensionField, region):
    """Node slices of U for a region spec: None, R (B_R^+) or (lo, hi, zmax)."""
    n = U.dim
    xs = [U.base.axis_coords(d) for d in range(n)]
    if region is None:
        return tuple(slice(None) for _ in range(n + 1))
    if np.isscalar(region):
        lo, hi, zmax = [-float(region)] * n, [float(region)] * n, float(region)
    else:
        lo, hi, zmax = region
        lo, hi = np.atleast_1d(lo), np.atleast_1d(hi)
    sl = []
    for d in range(n):
        tol = 1e-9 * max(1.0, abs(hi[d]), abs(lo[d]))
        if lo[d] < xs[d][0] - tol or hi[d] > xs[d][-1] + tol:
            raise ContractError("region exceeds the sampled box")
        idx = np.nonzero((xs[d] >= lo[d] - tol) & (xs[d] <= hi[d] + tol))[0]
        sl.append(slice(idx[0], idx[-1] + 1))
    zn = U.znodes
    if zmax > zn[-1] * (1 + 1e-9):
        raise ContractError("region exceeds the sampled height")
    kz = np.nonzero(zn <= zmax * (1 + 1e-9))[0][-1]
    sl.append(slice(0, kz + 1))
    return tuple(sl)


def dirichlet_density(U: ExtensionField, region=None):
    """(z^a |grad U|^2 at quadrature points, weights) restricted to a region."""
    sl = _select_region(U, region)
    nodal = U.nodal[sl]
    zn = U.znodes[sl[-1]]
    _, grads, wts = quadrature_sample(nodal, U.base.spacing, zn, U.a)
    return np.sum(grads ** 2, axis=0), wts


def weighted_dirichlet(U: ExtensionField, region=None) -> float:
    """int z^a |grad U|^2 over the region (whole mesh by default).

    ``region`` is a half-width R (the box [-R,R]^n x (0,R]) or a triple
    (lo, hi, zmax); it is snapped to mesh nodes.
    """
    dens, wts = dirichlet_density(U, region)
    return float(np.sum(dens * wts))


# --------------------------------------------------------------------------
# assembled bilinear form


def _fe_1d(N: int, h: float):
    main = np.full(N, 2.0)
    main[[0, -1]] = 1.0
    Kx = sparse.diags([-np.ones(N - 1), main, -np.ones(N - 1)], [-1, 0, 1]) / h
    Mx = sparse.diags([np.ones(N - 1), 2 * main, np.ones(N - 1)], [-1, 0, 1]) * (h / 6.0)
    return Kx.tocsr(), Mx.tocsr()


def _fe_z(znodes: np.ndarray, a: float):
    mom, _, _ = _z_rule(tuple(float(q) for q in znodes), float(a))
    D = np.diff(znodes)
    M = znodes.size
    Kz = sparse.lil_matrix((M, M))
    Mz = sparse.lil_matrix((M, M))
    for e in range(M - 1):
        m0, m1, m2 = mom[e, 0], mom[e, 1], mom[e, 2]
        k = m0 / D[e]
        # int w (1-t)^2, int w t(1-t), int w t^2 times D
        a00 = (m0 - 2 * m1 + m2) * D[e]
        a01 = (m1 - m2) * D[e]
        a11 = m2 * D[e]
        i, j = e, e + 1
        Kz[i, i] += k
        Kz[j, j] += k
        Kz[i, j] -= k
        Kz[j, i] -= k
        Mz[i, i] += a00
        Mz[j, j] += a11
        Mz[i, j] += a01
        Mz[j, i] += a01
    return Kz.tocsr(), Mz.tocsr()


def weighted_stiffness(xshape, h: float, znodes: np.ndarray, a: float) -> sparse.csr_matrix:
    """Matrix of U -> int z^a grad U . grad U on the Q1 mesh (C-order nodes, z last)."""
    Kz, Mz = _fe_z(np.asarray(znodes, dtype=float), a)
    xs = [_fe_1d(N, h) for N in xshape]
    n = len(xshape)
    A = None
    for g in range(n + 1):
        mats = []
        for d in range(n):
            mats.append(xs[d][0] if d == g else xs[d][1])
        mats.append(Kz if g == n else Mz)
        term = mats[0]
        for m_ in mats[1:]:
            term = sparse.kron(term, m_, format="csr")
        A = term if A is None else A + term
    return A.tocsr()
