"""Integrals of the algebraic kernel (|y|^2 + b^2)^(-p) over cells and regions.

Everything here is dimension-agnostic bookkeeping shared by the discrete
fractional Laplacian and the Poisson-kernel extension.  The first axis of a
box is always integrated in closed form through a hypergeometric
antiderivative; the remaining axes use Gauss-Legendre rules.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy import integrate, special


@lru_cache(maxsize=None)
def gauss(nq: int):
    x, w = np.polynomial.legendre.leggauss(nq)
    return x, w


def _antideriv_pos(t, b, p):
    """int_0^t (tau^2 + b^2)^(-p) dtau for t >= 0, b > 0 (t may be inf)."""
    t = np.asarray(t, dtype=float)
    b = np.asarray(b, dtype=float)
    t, b = np.broadcast_arrays(t, b)
    out = np.empty(t.shape)
    full = 0.5 * b ** (1 - 2 * p) * special.beta(0.5, p - 0.5)
    small = t <= b
    if np.any(small):
        ts, bs = t[small], b[small]
        out[small] = ts * bs ** (-2 * p) * special.hyp2f1(0.5, p, 1.5, -(ts / bs) ** 2)
    big = ~small
    if np.any(big):
        tb, bb = t[big], b[big]
        with np.errstate(divide="ignore", invalid="ignore"):
            tail = tb ** (1 - 2 * p) / (2 * p - 1) * special.hyp2f1(p, p - 0.5, p + 0.5, -(bb / tb) ** 2)
        tail = np.where(np.isinf(tb), 0.0, tail)
        out[big] = full[big] - tail
    return out


def antideriv(t, bsq, p):
    """Odd antiderivative of (t^2 + b^2)^(-p) in t.

    For b > 0 it vanishes at t = 0.  For b = 0 it is -t^(1-2p)/(2p-1) on
    t > 0, extended oddly, which is only meaningful for intervals that do
    not contain the origin.
    """
    t = np.asarray(t, dtype=float)
    bsq = np.asarray(bsq, dtype=float)
    t, bsq = np.broadcast_arrays(t, bsq)
    at = np.abs(t)
    out = np.empty(t.shape)
    zero = bsq <= 0
    if np.any(zero):
        with np.errstate(divide="ignore"):
            out[zero] = -at[zero] ** (1 - 2 * p) / (2 * p - 1)
    pos = ~zero
    if np.any(pos):
        out[pos] = _antideriv_pos(at[pos], np.sqrt(bsq[pos]), p)
    return np.sign(t) * out


def line_integral(a1, a2, bsq, p):
    """int_{a1}^{a2} (t^2 + bsq)^(-p) dt, vectorized, infinite ends allowed."""
    return antideriv(a2, bsq, p) - antideriv(a1, bsq, p)


def _axis_nodes(lo, hi, nq):
    """Gauss nodes/weights on [lo, hi] per entry; semi-infinite ranges mapped."""
    x, w = gauss(nq)
    lo = np.asarray(lo, dtype=float)[..., None]
    hi = np.asarray(hi, dtype=float)[..., None]
    fin = np.isfinite(lo) & np.isfinite(hi)
    u = 0.5 * (x + 1.0)  # on (0, 1)
    wu = 0.5 * w
    # finite ranges
    with np.errstate(invalid="ignore"):
        nodes = 0.5 * (lo + hi) + 0.5 * (hi - lo) * x
        weights = 0.5 * (hi - lo) * w * np.ones_like(nodes)
    # [lo, inf): y = lo + L u/(1-u); (-inf, hi]: y = hi - L u/(1-u)
    scale = np.maximum(1.0, np.where(np.isfinite(lo), np.abs(lo), np.abs(hi)))
    jac = scale / (1 - u) ** 2
    up = np.isfinite(lo) & ~np.isfinite(hi)
    dn = ~np.isfinite(lo) & np.isfinite(hi)
    if np.any(up | dn):
        nodes = np.where(up, lo + scale * u / (1 - u), nodes)
        nodes = np.where(dn, hi - scale * u / (1 - u), nodes)
        weights = np.where(up | dn, jac * wu, weights)
    if np.any(~fin & ~up & ~dn):
        raise ValueError("doubly infinite secondary axis not supported")
    return nodes, weights


def box_integral(lo, hi, p, bsq=0.0, nq=6):
    """int over the box [lo, hi] of (|y|^2 + bsq)^(-p) dy.

    ``lo`` and ``hi`` have shape (..., n).  Axis 0 is done in closed form,
    the others by ``nq``-point Gauss rules (mapped on semi-infinite ranges).
    For n = 2, boxes whose first-axis range straddles the origin are split
    so that the peaked part is integrated exactly along the second axis too.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    n = lo.shape[-1]
    bsq = np.broadcast_to(np.asarray(bsq, dtype=float), lo.shape[:-1])
    if n == 1:
        return line_integral(lo[..., 0], hi[..., 0], bsq, p)
    if n == 2:
        return _box2(lo, hi, p, bsq, nq)
    # n == 3: tensor Gauss over axes 1, 2
    y1, w1 = _axis_nodes(lo[..., 1], hi[..., 1], nq)
    y2, w2 = _axis_nodes(lo[..., 2], hi[..., 2], nq)
    r2 = y1[..., :, None] ** 2 + y2[..., None, :] ** 2 + bsq[..., None, None]
    g = line_integral(lo[..., 0, None, None], hi[..., 0, None, None], r2, p)
    return np.einsum("...ij,...i,...j->...", g, w1, w2)


def _box2(lo, hi, p, bsq, nq):
    a1, a2 = lo[..., 0], hi[..., 0]
    straddle = (a1 < 0) & (a2 > 0) & np.isfinite(lo[..., 1]) & np.isfinite(hi[..., 1])
    out = np.empty(a1.shape)
    y, w = _axis_nodes(lo[..., 1], hi[..., 1], nq)
    reg = ~straddle
    if np.any(reg):
        b2 = y[reg] ** 2 + bsq[reg][:, None]
        g = line_integral(a1[reg][:, None], a2[reg][:, None], b2, p)
        out[reg] = np.sum(g * w[reg], axis=-1)
    if np.any(straddle):
        st = straddle
        # whole line in y1 is exact in y2 as well; subtract the two smooth tails
        full = special.beta(0.5, p - 0.5) * line_integral(lo[st][:, 1], hi[st][:, 1], bsq[st], p - 0.5)
        b2 = y[st] ** 2 + bsq[st][:, None]
        tails = line_integral(-np.inf, a1[st][:, None], b2, p) + line_integral(a2[st][:, None], np.inf, b2, p)
        out[st] = full - np.sum(tails * w[st], axis=-1)
    return out


def cell_weights_gauss(centers, h, p, bsq=0.0, nq=4):
    """Tensor Gauss approximation of box_integral for cells of side h.

    ``centers`` has shape (..., n).  Cheap, and accurate when the cells are
    several widths away from the singularity.
    """
    centers = np.asarray(centers, dtype=float)
    n = centers.shape[-1]
    x, w = gauss(nq)
    total = np.zeros(centers.shape[:-1])
    grids = np.meshgrid(*([x] * n), indexing="ij")
    wts = np.ones_like(grids[0])
    for g in np.meshgrid(*([w] * n), indexing="ij"):
        wts = wts * g
    for idx in np.ndindex(*grids[0].shape):
        r2 = bsq + sum((centers[..., d] + 0.5 * h * grids[d][idx]) ** 2 for d in range(n))
        total += wts[idx] * r2 ** (-p)
    return total * (0.5 * h) ** n


@lru_cache(maxsize=None)
def sphere_power(n: int, beta: float) -> float:
    """int over the unit-cube boundary directions of r(sigma)^beta dsigma.

    r(sigma) is the distance to the boundary of [-1,1]^n along direction
    sigma; by face parametrization this is 2n int_{[-1,1]^{n-1}} (1+|u|^2)^((beta-n)/2) du.
    """
    e = 0.5 * (beta - n)
    if n == 1:
        return 2.0
    if n == 2:
        val, _ = integrate.quad(lambda u: (1 + u * u) ** e, -1, 1, epsabs=1e-14, epsrel=1e-13)
        return 4.0 * val
    if n == 3:
        val, _ = integrate.dblquad(lambda v, u: (1 + u * u + v * v) ** e, -1, 1, -1, 1,
                                   epsabs=1e-13, epsrel=1e-12)
        return 6.0 * val
    raise ValueError("n must be 1, 2 or 3")


def cube_moment(n: int, gamma: float) -> float:
    """int_{[-1,1]^n} |y|^gamma dy for gamma > -n."""
    return sphere_power(n, gamma + n) / (gamma + n)


def cube_exterior(n: int, s: float) -> float:
    """int outside [-1,1]^n of |y|^(-n-2s) dy."""
    return sphere_power(n, -2.0 * s) / (2.0 * s)


def halfspace_factor(n: int, s: float) -> float:
    """int_{R^{n-1}} (1+|u|^2)^(-(n+2s)/2) du, so a half-space at distance d carries this * d^(-2s)/(2s)."""
    return np.pi ** (0.5 * (n - 1)) * special.gamma(0.5 + s) / special.gamma(0.5 * n + s)


def rect_exterior_2d(lo, hi, t, p, nq=16):
    """int over R^2 minus [lo0,hi0]x[lo1,hi1] of (|y|^2 + t^2)^(-p) dy.

    The origin must lie inside the rectangle.  Uses polar coordinates
    about the origin, with the angular integral split at the corners.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    t2 = np.asarray(t, dtype=float) ** 2
    x, w = gauss(nq)
    # corners in counterclockwise order starting from (hi0, lo1)
    cx = [hi[..., 0], hi[..., 0], lo[..., 0], lo[..., 0]]
    cy = [lo[..., 1], hi[..., 1], hi[..., 1], lo[..., 1]]
    # face k lies between corner k and k+1; outward distance and normal angle
    dists = [hi[..., 0], hi[..., 1], -lo[..., 0], -lo[..., 1]]
    normals = [0.0, 0.5 * np.pi, np.pi, 1.5 * np.pi]
    total = 0.0
    for k in range(4):
        th0 = np.arctan2(cy[k], cx[k])
        th1 = np.arctan2(cy[(k + 1) % 4], cx[(k + 1) % 4])
        d0 = np.mod(th0 - normals[k] + np.pi, 2 * np.pi) - np.pi
        d1 = np.mod(th1 - normals[k] + np.pi, 2 * np.pi) - np.pi
        ang = 0.5 * (d0 + d1)[..., None] + 0.5 * (d1 - d0)[..., None] * x
        r2 = (dists[k][..., None] / np.cos(ang)) ** 2
        f = (r2 + t2[..., None] if np.ndim(t2) else r2 + t2) ** (1 - p) / (2 * (p - 1))
        total = total + 0.5 * (d1 - d0) * np.sum(f * w, axis=-1)
    return total
