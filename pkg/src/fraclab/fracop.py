"""The fractional Laplacian on uniform grids.

The operator is taken in its symmetrized second-difference form

    (-Delta)^s u(x) = c_{n,s} int (2u(x) - u(x+y) - u(x-y)) |y|^{-n-2s} dy,

and discretized as a translation-invariant stencil:

* near field, the cube |y|_inf <= rho = (m + 1/2) h: a quadratic Taylor model
  of ``u``, which turns the integral into ``-(M/n) Delta_h u`` with
  ``M = int_cube |y|^{2-n-2s}``;
* mid field, every other cell of the (ghost-padded) box: exact kernel mass
  of the cell times the cell value;
* exterior of the padded box: closed-form kernel masses times the values
  prescribed by the tail model.

The same stencil backs the whole-grid sweep (FFT convolution), the pointwise
evaluator (direct sums) and the energies, so residuals, energies and
stability forms all refer to one discrete operator.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional, Sequence

import mpmath
import numpy as np
from scipy import fft as sfft
from scipy import special

from . import _kernels as K

NEAR_CELLS = 4


class ContractError(ValueError):
    """An operation was called outside its documented preconditions."""


class TruncationBudgetError(RuntimeError):
    """Estimated truncation error exceeds the allowed budget."""

    def __init__(self, msg, bound):
        super().__init__(msg)
        self.bound = bound


# --------------------------------------------------------------------------
# data types


@dataclass(frozen=True)
class TailModel:
    """Far-field model of a grid function outside its sampled box.

    ``kind`` is ``"constant"``, ``"pm1"``, ``"edge"`` or ``"periodic"``.
    For ``"pm1"`` the function is ``-direction`` below and ``+direction``
    above the box along ``axis``; along the other axes the edge values are
    extended constantly.  ``"edge"`` extends the edge values constantly in
    every direction.
    """

    kind: str
    value: float = 0.0
    axis: int = -1
    direction: int = 1
    mismatch_bound: float = 0.05

    @classmethod
    def constant(cls, c: float = 0.0) -> "TailModel":
        return cls("constant", value=float(c))

    @classmethod
    def constant_pm1(cls, axis: int = -1, direction: int = 1, mismatch_bound: float = 0.05) -> "TailModel":
        return cls("pm1", axis=axis, direction=int(np.sign(direction)) or 1, mismatch_bound=mismatch_bound)

    @classmethod
    def periodic(cls) -> "TailModel":
        return cls("periodic")

    @classmethod
    def edge(cls) -> "TailModel":
        """Edge values extended constantly outward along every axis."""
        return cls("edge")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "value": self.value, "axis": self.axis,
                "direction": self.direction, "mismatch_bound": self.mismatch_bound}

    @classmethod
    def from_dict(cls, d: dict) -> "TailModel":
        return cls(d["kind"], float(d.get("value", 0.0)), int(d.get("axis", -1)),
                   int(d.get("direction", 1)), float(d.get("mismatch_bound", 0.05)))


@dataclass
class GridFunction:
    values: np.ndarray
    spacing: float
    origin: tuple
    tail: TailModel
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.origin = tuple(float(o) for o in np.atleast_1d(self.origin))
        if len(self.origin) != self.values.ndim:
            raise ContractError("origin length must match the array dimension")
        if self.values.ndim not in (1, 2, 3):
            raise ContractError("only n = 1, 2, 3 are supported")
        if not np.all(np.isfinite(self.values)):
            raise ContractError("grid values must be finite")

    @property
    def dim(self) -> int:
        return self.values.ndim

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def h(self) -> float:
        return self.spacing

    def axis_coords(self, d: int) -> np.ndarray:
        return self.origin[d] + self.spacing * np.arange(self.shape[d])

    def coords(self) -> list[np.ndarray]:
        return np.meshgrid(*[self.axis_coords(d) for d in range(self.dim)], indexing="ij")

    def upper(self) -> np.ndarray:
        return np.array(self.origin) + self.spacing * (np.array(self.shape) - 1)

    def with_values(self, values, tail: Optional[TailModel] = None) -> "GridFunction":
        return GridFunction(np.array(values, dtype=float), self.spacing, self.origin,
                            self.tail if tail is None else tail, dict(self.info))

    def index_of(self, x) -> np.ndarray:
        """Fractional grid index of a point."""
        return (np.asarray(x, dtype=float) - np.array(self.origin)) / self.spacing

    def tail_mismatch(self) -> float:
        """Sup distance between face values and the tail prescription."""
        t = self.tail
        if t.kind == "constant":
            return 0.0 if self.dim == 0 else float(max(
                np.max(np.abs(np.take(self.values, [0, -1], axis=d) - t.value)) for d in range(self.dim)))
        if t.kind == "pm1":
            lo = np.take(self.values, 0, axis=t.axis)
            hi = np.take(self.values, -1, axis=t.axis)
            return float(max(np.max(np.abs(lo + t.direction)), np.max(np.abs(hi - t.direction))))
        return 0.0


@dataclass(frozen=True)
class FracConstant:
    n: int
    s: float
    value: float


def _check_s(s: float):
    if not (0.0 < s < 1.0) or not np.isfinite(s):
        raise ValueError(f"s must lie in (0, 1), got {s}")


def frac_constant(n: int, s: float) -> FracConstant:
    """c_{n,s} = 2^{2s-1} s Gamma(n/2+s) / (pi^{n/2} Gamma(1-s)).

    With this constant the symmetrized second-difference operator has
    Fourier symbol exactly |k|^{2s}.
    """
    _check_s(s)
    if int(n) < 1:
        raise ValueError("n must be a positive integer")
    logc = ((2 * s - 1) * np.log(2.0) + np.log(s) + special.gammaln(0.5 * n + s)
            - 0.5 * n * np.log(np.pi) - special.gammaln(1 - s))
    return FracConstant(int(n), float(s), float(np.exp(logc)))


# --------------------------------------------------------------------------
# stencil construction


def _near_coefficient(n: int, s: float, rho: float) -> float:
    """M_n(rho)/n with M_n(rho) = int_{|y|_inf<rho} |y|^{2-n-2s} dy."""
    return rho ** (2 - 2 * s) * K.cube_moment(n, 2 - n - 2 * s) / n


def _mid_weights(n: int, s: float, h: float, half: Sequence[int], m: int) -> np.ndarray:
    """Cell masses of |y|^{-n-2s} on offsets |j_d| <= half[d], zero on the near cube."""
    p = 0.5 * (n + 2 * s)
    axes = [np.arange(-k, k + 1) for k in half]
    J = np.meshgrid(*axes, indexing="ij")
    jinf = np.max(np.abs(np.stack(J)), axis=0)
    w = np.zeros(jinf.shape)
    if n == 1:
        j = np.abs(J[0]).astype(float)
        far = jinf > m
        a, b = (j[far] - 0.5) * h, (j[far] + 0.5) * h
        w[far] = (a ** (-2 * s) - b ** (-2 * s)) / (2 * s)
        return w
    centers = np.stack([Jd * h for Jd in J], axis=-1)
    shell = (jinf > m) & (jinf <= m + 4)
    far = jinf > m + 4
    lo = centers[shell] - 0.5 * h
    w[shell] = K.box_integral(lo, lo + h, p, 0.0, nq=8)
    w[far] = K.cell_weights_gauss(centers[far], h, p, nq=4)
    return w


def _hurwitz_pair_sum(sig: float, a: float, b: float) -> float:
    """sum_{q>=0} (q+a)^{-sig} - (q+b)^{-sig}."""
    if abs(sig - 1.0) < 1e-14:
        return float(mpmath.digamma(b) - mpmath.digamma(a))
    return float(mpmath.zeta(sig, a) - mpmath.zeta(sig, b))


def _periodic_weights_1d(s: float, h: float, N: int, m: int) -> np.ndarray:
    """Image sums of the 1D cell masses, indexed by residue 0..N-1, exactly."""
    if N <= 2 * m + 1:
        raise ContractError("periodic grid too small for the near-field stencil")
    sig = 2 * s
    pref = (N * h) ** (-sig) / sig

    def one_sided(r):
        j0 = r if r > m else r + N * int(np.ceil((m + 1 - r) / N))
        return pref * _hurwitz_pair_sum(sig, (j0 - 0.5) / N, (j0 + 0.5) / N)

    side = np.array([one_sided(r) for r in range(N)])
    return side + side[(-np.arange(N)) % N]


def _periodic_weights_2d(s: float, h: float, shape: Sequence[int], m: int, Q: int = 3) -> np.ndarray:
    """Image sums for n = 2: direct over (2Q+1)^2 images plus a uniform remainder."""
    n = 2
    p = 0.5 * (n + 2 * s)
    N0, N1 = shape
    r0 = np.arange(N0) - N0 // 2
    r1 = np.arange(N1) - N1 // 2
    W = np.zeros((N0, N1))
    for q0 in range(-Q, Q + 1):
        for q1 in range(-Q, Q + 1):
            J0, J1 = np.meshgrid(r0 + q0 * N0, r1 + q1 * N1, indexing="ij")
            jinf = np.maximum(np.abs(J0), np.abs(J1))
            c = np.stack([J0 * h, J1 * h], axis=-1)
            wq = np.zeros(J0.shape)
            shell = (jinf > m) & (jinf <= m + 4)
            far = jinf > m + 4
            lo = c[shell] - 0.5 * h
            wq[shell] = K.box_integral(lo, lo + h, p, 0.0, nq=8)
            wq[far] = K.cell_weights_gauss(c[far], h, p, nq=4)
            W += wq
    lo = np.array([(r0[0] - Q * N0 - 0.5) * h, (r1[0] - Q * N1 - 0.5) * h])
    hi = np.array([(r0[-1] + Q * N0 + 0.5) * h, (r1[-1] + Q * N1 + 0.5) * h])
    W += K.rect_exterior_2d(lo, hi, 0.0, p, nq=32) / (N0 * N1)
    # reorder from centred residues to 0..N-1
    return np.roll(W, (-(N0 // 2), -(N1 // 2)), axis=(0, 1))


class _Strips:
    """Exterior strips beyond both faces normal to axis ``lat`` (n = 2).

    A strip cell is {y_lat beyond the padded face} x {one padded row along
    the other axis}; its value is the padded edge value of that row.
    """

    def __init__(self, s, h, P, shape, Sp, lat, nq=6):
        self.lat = lat
        other = 1 - lat
        self.n_lat = shape[lat]
        self.n_other = shape[other]
        self.P = P
        self.K_half = Sp[other] - 1
        dist = (np.arange(self.n_lat) + P + 0.5) * h
        k = np.arange(-self.K_half, self.K_half + 1)
        lo = np.empty((self.n_lat, k.size, 2))
        hi = np.empty_like(lo)
        lo[..., 0], hi[..., 0] = dist[:, None], np.inf
        lo[..., 1], hi[..., 1] = (k[None, :] - 0.5) * h, (k[None, :] + 0.5) * h
        table = K.box_integral(lo, hi, 1.0 + s, 0.0, nq=nq)
        self.Ls = sfft.next_fast_len(table.shape[1] + Sp[other] - 1, real=True)
        self.hat = sfft.rfft(table, self.Ls, axis=1)
        ones = np.ones(Sp[other])
        self.mass = self.apply(ones, ones)

    def apply(self, low, high):
        """Strip sums in box orientation from the two padded edge lines."""
        start = self.K_half + self.P

        def corr(col):
            f = sfft.irfft(self.hat * sfft.rfft(col, self.Ls)[None, :], self.Ls, axis=1)
            return f[:, start:start + self.n_other]

        # table rows count the distance to the face, so the far face reads them reversed
        g = corr(low) + corr(high)[::-1]
        return g if self.lat == 0 else g.T


def _next_fast(shape):
    return tuple(sfft.next_fast_len(int(L), real=True) for L in shape)


class DiscreteFracLaplacian:
    """Whole-grid discrete (-Delta)^s for n in {1, 2} with a given tail kind.

    Instances are cached by (shape, h, s, tail kind, axis); tail values are
    supplied at application time.
    """

    def __init__(self, shape, h, s, kind="constant", axis=-1, near=NEAR_CELLS):
        _check_s(s)
        self.shape = tuple(int(N) for N in shape)
        self.n = n = len(self.shape)
        if n not in (1, 2):
            raise ContractError("whole-grid sweeps support n = 1, 2 only; use frac_laplacian pointwise for n = 3")
        self.h, self.s, self.kind, self.m = float(h), float(s), kind, int(near)
        self.axis = axis % n if kind == "pm1" else None
        # the symmetric integrand equals twice the one-sided one, so every
        # stencil piece below is one-sided and the prefactor is 2 c_{n,s}
        self.c = 2.0 * frac_constant(n, s).value
        self.rho = (self.m + 0.5) * h
        self.a_near = 0.5 * _near_coefficient(n, s, self.rho)
        self.exterior_total = K.cube_exterior(n, s) * self.rho ** (-2 * s)
        if kind == "periodic":
            self._build_periodic()
        else:
            self._build_padded()

    # ---- construction
    def _build_periodic(self):
        if self.n == 1:
            W = _periodic_weights_1d(self.s, self.h, self.shape[0], self.m)
        else:
            W = _periodic_weights_2d(self.s, self.h, self.shape, self.m)
        self.P = 1
        self.W_hat = sfft.rfftn(W)
        self.S_in = np.full(self.shape, W.sum())
        self.T_ext = np.zeros(self.shape)

    def _build_padded(self):
        n, h, s, m = self.n, self.h, self.s, self.m
        self.P = P = m + 1
        self.Sp = Sp = tuple(N + 2 * P for N in self.shape)
        half = [L - 1 for L in Sp]
        w = _mid_weights(n, s, h, half, m)
        self.w = w
        self.L = _next_fast([L + 2 * L - 2 for L in Sp])
        self.w_hat = sfft.rfftn(w, self.L)
        self.S_in = self._conv_padded(np.ones(Sp))
        self.T_ext = self.exterior_total - self.S_in
        if self.kind == "pm1":
            self._build_pm1()
        elif self.kind == "edge":
            self._build_edge()

    def _build_pm1(self):
        n, h, s, P = self.n, self.h, self.s, self.P
        ax = self.axis
        N = self.shape[ax]
        idx = np.arange(N)
        beta = K.halfspace_factor(n, s)
        d_top = (N - 1 - idx + P + 0.5) * h
        d_bot = (idx + P + 0.5) * h
        shp = [1] * n
        shp[ax] = N
        self.T_top = np.broadcast_to((beta * d_top ** (-2 * s) / (2 * s)).reshape(shp), self.shape)
        self.T_bot = np.broadcast_to((beta * d_bot ** (-2 * s) / (2 * s)).reshape(shp), self.shape)
        self.strips = {}
        if n == 2:
            self.strips[1 - ax] = _Strips(s, h, P, self.shape, self.Sp, 1 - ax)
            self.T_lat = self.strips[1 - ax].mass
        else:
            self.T_lat = np.zeros(self.shape)
        self.T_diag = self.T_top + self.T_bot + self.T_lat

    def _build_edge(self):
        n, h, s, P = self.n, self.h, self.s, self.P
        if n == 1:
            N = self.shape[0]
            idx = np.arange(N)
            self.T_top = ((N - 1 - idx + P + 0.5) * h) ** (-2 * s) / (2 * s)
            self.T_bot = ((idx + P + 0.5) * h) ** (-2 * s) / (2 * s)
            self.T_diag = self.T_top + self.T_bot
            return
        self.strips = {d: _Strips(s, h, P, self.shape, self.Sp, d) for d in (0, 1)}
        N0, N1 = self.shape
        a = (np.arange(N0) + P + 0.5) * h
        b = (np.arange(N1) + P + 0.5) * h
        lo = np.empty((N0, N1, 2))
        lo[..., 0] = a[:, None]
        lo[..., 1] = b[None, :]
        self.corner = K.box_integral(lo, np.full_like(lo, np.inf), 1.0 + s, 0.0, nq=16)
        c = self.corner
        self.T_diag = (self.strips[0].mass + self.strips[1].mass
                       + c + c[::-1, :] + c[:, ::-1] + c[::-1, ::-1])

    # ---- primitive pieces
    def _conv_padded(self, arr):
        """sum_j w_j arr_{i+j} on box nodes, arr given on the padded grid."""
        full = sfft.irfftn(sfft.rfftn(arr, self.L) * self.w_hat, self.L)
        sl = tuple(slice(L - 1 + self.P, L - 1 + self.P + N) for L, N in zip(self.Sp, self.shape))
        return full[sl]

    def pad(self, values, tail: TailModel, P: Optional[int] = None):
        P = self.P if P is None else P
        return pad_with_tail(values, tail, P)

    def _exterior(self, ut, tail: TailModel, squared=False):
        """(diagonal mass, weighted exterior values) for the given tail."""
        sq = (lambda a: a ** 2) if squared else (lambda a: a)
        if tail.kind == "constant":
            return self.T_ext, sq(tail.value) * self.T_ext
        if tail.kind != self.kind or (tail.kind == "pm1" and (tail.axis % self.n) != self.axis):
            raise ContractError("stencil was built for a different tail model")
        if tail.kind == "pm1":
            dr = float(tail.direction)
            G = sq(dr) * self.T_top + sq(-dr) * self.T_bot
            if self.n == 2:
                lat = 1 - self.axis
                G = G + self.strips[lat].apply(sq(np.take(ut, 0, axis=lat)), sq(np.take(ut, -1, axis=lat)))
            return self.T_diag, G
        if tail.kind == "edge":
            if self.n == 1:
                return self.T_diag, sq(ut[-1]) * self.T_top + sq(ut[0]) * self.T_bot
            G = sum(self.strips[d].apply(sq(np.take(ut, 0, axis=d)), sq(np.take(ut, -1, axis=d)))
                    for d in (0, 1))
            c = self.corner
            G = G + (sq(ut[0, 0]) * c + sq(ut[-1, 0]) * c[::-1, :]
                     + sq(ut[0, -1]) * c[:, ::-1] + sq(ut[-1, -1]) * c[::-1, ::-1])
            return self.T_diag, G
        raise ContractError(f"unsupported tail {tail.kind!r}")

    def _laplacian(self, ut):
        P = self.P
        core = tuple(slice(P, P + N) for N in self.shape)
        out = -2 * self.n * ut[core]
        for d in range(self.n):
            for sh in (-1, 1):
                sl = list(core)
                sl[d] = slice(P + sh, P + sh + self.shape[d])
                out = out + ut[tuple(sl)]
        return out / self.h ** 2

    # ---- public
    def apply(self, values, tail: TailModel):
        """c_{n,s} times the stencil applied to ``values`` with the given tail."""
        u = np.asarray(values, dtype=float)
        if u.shape != self.shape:
            raise ContractError("shape mismatch")
        if self.kind == "periodic":
            if tail.kind != "periodic":
                raise ContractError("periodic stencil needs a periodic tail")
            ut = np.pad(u, 1, mode="wrap")
            conv = sfft.irfftn(sfft.rfftn(u) * self.W_hat, self.shape)
            out = -self.a_near * self._laplacian(ut) + u * self.S_in - conv
            return self.c * out
        if tail.kind == "periodic":
            raise ContractError("periodic tail needs a periodic stencil")
        ut = self.pad(u, tail)
        T, G = self._exterior(ut, tail)
        out = -self.a_near * self._laplacian(ut) + u * self.S_in - self._conv_padded(ut) + u * T - G
        return self.c * out

    def apply_zero(self, values):
        """Operator on a function extended by zero (compact perturbations)."""
        if self.kind == "periodic":
            return self.apply(values, TailModel.periodic())
        return self.apply(values, TailModel.constant(0.0))

    def diagonal(self):
        T = self.T_diag if self.kind in ("pm1", "edge") else self.T_ext
        if self.kind == "periodic":
            return self.c * (2 * self.n * self.a_near / self.h ** 2 + self.S_in - self._wrap_self())
        return self.c * (2 * self.n * self.a_near / self.h ** 2 + self.S_in + T)

    def _wrap_self(self):
        e = np.zeros(self.shape)
        e[(0,) * self.n] = 1.0
        return sfft.irfftn(sfft.rfftn(e) * self.W_hat, self.shape)[(0,) * self.n]

    def carre(self, values, tail: TailModel, mask=None):
        """Per-node kinetic density sum_j w_j (u_i - u_{i+j})^2 plus near and tail parts.

        With ``mask`` (boolean on the box), partners are restricted to the
        masked nodes and the exterior is dropped; the near field is kept.
        """
        u = np.asarray(values, dtype=float)
        ut = self.pad(u, tail)
        P = self.P
        grad2 = np.zeros(self.shape)
        core = tuple(slice(P, P + N) for N in self.shape)
        for d in range(self.n):
            hi = list(core)
            lo = list(core)
            hi[d] = slice(P + 1, P + 1 + self.shape[d])
            lo[d] = slice(P - 1, P - 1 + self.shape[d])
            fwd = ut[tuple(hi)] - u
            bwd = u - ut[tuple(lo)]
            grad2 += 0.5 * (fwd ** 2 + bwd ** 2) / self.h ** 2
        # int_cube (grad u . y)^2 K = |grad u|^2 M/n = 2 a_near |grad u|^2
        near = 2.0 * self.a_near * grad2
        if mask is None:
            T, G = self._exterior(ut, tail)
            _, G2 = self._exterior(ut, tail, squared=True)
            mid = u ** 2 * self.S_in - 2 * u * self._conv_padded(ut) + self._conv_padded(ut ** 2)
            return near + mid + u ** 2 * T - 2 * u * G + G2
        mk = np.zeros(self.Sp)
        mk[core] = np.asarray(mask, dtype=float)
        mid = u ** 2 * self._conv_padded(mk) - 2 * u * self._conv_padded(mk * ut) + self._conv_padded(mk * ut ** 2)
        return near + mid

    def lambda_max(self, iters=60, seed=0):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(self.shape)
        lam = 0.0
        for _ in range(iters):
            y = self.apply_zero(x)
            lam = float(np.vdot(x, y) / np.vdot(x, x))
            x = y / np.linalg.norm(y)
        return lam


@lru_cache(maxsize=32)
def get_stencil(shape, h, s, kind, axis=-1, near=NEAR_CELLS) -> DiscreteFracLaplacian:
    if kind != "pm1":
        axis = -1
    return DiscreteFracLaplacian(tuple(shape), float(h), float(s), kind, axis, near)


def stencil_for(u: GridFunction, s: float) -> DiscreteFracLaplacian:
    kind = u.tail.kind
    axis = u.tail.axis % u.dim if kind == "pm1" else -1
    return get_stencil(u.shape, u.spacing, s, kind, axis)


def pad_with_tail(values, tail: TailModel, P: int):
    """Ghost-pad ``values`` by P cells according to the tail model."""
    u = np.asarray(values, dtype=float)
    if tail.kind == "constant":
        return np.pad(u, P, mode="constant", constant_values=tail.value)
    if tail.kind == "periodic":
        return np.pad(u, P, mode="wrap")
    if tail.kind == "edge":
        return np.pad(u, P, mode="edge")
    if tail.kind == "pm1":
        ax = tail.axis % u.ndim
        widths = [(P, P) if d != ax else (0, 0) for d in range(u.ndim)]
        ut = np.pad(u, widths, mode="edge")
        widths = [(0, 0)] * u.ndim
        widths[ax] = (P, 0)
        ut = np.pad(ut, widths, mode="constant", constant_values=-tail.direction)
        widths[ax] = (0, P)
        return np.pad(ut, widths, mode="constant", constant_values=tail.direction)
    raise ContractError(f"unknown tail kind {tail.kind!r}")


def apply_frac_laplacian(u: GridFunction, s: float) -> GridFunction:
    """Whole-grid discrete (-Delta)^s u (n = 1, 2)."""
    L = stencil_for(u, s)
    return u.with_values(L.apply(u.values, u.tail))


# --------------------------------------------------------------------------
# pointwise evaluation (direct sums, independent of the FFT sweep)


def _pointwise_node(u: GridFunction, s: float, idx: tuple, near: int = NEAR_CELLS) -> float:
    n, h = u.dim, u.spacing
    m = near
    c = 2.0 * frac_constant(n, s).value  # one-sided sums below
    p = 0.5 * (n + 2 * s)
    rho = (m + 0.5) * h
    a_near = 0.5 * _near_coefficient(n, s, rho)
    idx = np.array(idx, dtype=int)
    tail = u.tail
    if tail.kind == "periodic":
        shape = u.shape
        ut = np.pad(u.values, 1, mode="wrap")
        if n == 1:
            W = _periodic_weights_1d(s, h, shape[0], m)
        elif n == 2:
            W = _periodic_weights_2d(s, h, shape, m)
        else:
            raise ContractError("periodic pointwise evaluation supports n = 1, 2")
        shifted = np.roll(u.values, tuple(-idx), axis=tuple(range(n)))
        mid = u.values[tuple(idx)] * W.sum() - np.sum(W * shifted)
        lap = _node_laplacian(ut, idx + 1, h)
        return c * (-a_near * lap + mid)
    P = m + 1
    ut = pad_with_tail(u.values, tail, P)
    ui = u.values[tuple(idx)]
    pos = idx + P
    # offsets of every padded cell from the node
    rel = [np.arange(L) - pi for L, pi in zip(ut.shape, pos)]
    J = np.meshgrid(*rel, indexing="ij")
    jinf = np.max(np.abs(np.stack(J)), axis=0)
    far = jinf > m
    w = np.zeros(ut.shape)
    if n == 1:
        j = np.abs(J[0][far]).astype(float)
        w[far] = (((j - 0.5) * h) ** (-2 * s) - ((j + 0.5) * h) ** (-2 * s)) / (2 * s)
    else:
        centers = np.stack([Jd * h for Jd in J], axis=-1)[far]
        w[far] = K.cell_weights_gauss(centers, h, p, nq=4)
        shell = (jinf > m) & (jinf <= m + 4)
        lo = np.stack([Jd * h for Jd in J], axis=-1)[shell] - 0.5 * h
        w[shell] = K.box_integral(lo, lo + h, p, 0.0, nq=8)
    mid = np.sum(w * (ui - ut))
    lap = _node_laplacian(ut, pos, h)
    T_ext = K.cube_exterior(n, s) * rho ** (-2 * s) - w.sum()
    if tail.kind == "constant":
        ext = (ui - tail.value) * T_ext
    elif tail.kind == "edge":
        ext = _edge_exterior(u, s, ut, idx, P, ui)
    else:
        ext = _pm1_exterior(u, s, ut, idx, P, ui)
    return c * (-a_near * lap + mid + ext)


def _node_laplacian(ut, pos, h):
    n = ut.ndim
    c = ut[tuple(pos)]
    tot = -2 * n * c
    for d in range(n):
        for sh in (-1, 1):
            q = np.array(pos)
            q[d] += sh
            tot += ut[tuple(q)]
    return tot / h ** 2


def _pm1_exterior(u, s, ut, idx, P, ui):
    n, h = u.dim, u.spacing
    ax = u.tail.axis % n
    dr = u.tail.direction
    p = 0.5 * (n + 2 * s)
    N = u.shape[ax]
    beta = K.halfspace_factor(n, s)
    d_top = (N - 1 - idx[ax] + P + 0.5) * h
    d_bot = (idx[ax] + P + 0.5) * h
    t_top = beta * d_top ** (-2 * s) / (2 * s)
    t_bot = beta * d_bot ** (-2 * s) / (2 * s)
    ext = (ui - dr) * t_top + (ui + dr) * t_bot
    if n == 1:
        return ext
    # lateral exterior, row by row along the monotone axis
    Sa = ut.shape[ax]
    rows = (np.arange(Sa) - (idx[ax] + P)) * h
    lat_axes = [d for d in range(n) if d != ax]
    lo_l = np.array([-(idx[d] + P + 0.5) * h for d in lat_axes])
    hi_l = np.array([(u.shape[d] - 1 - idx[d] + P + 0.5) * h for d in lat_axes])
    if n == 2:
        lo = np.empty((2 * Sa, 2))
        hi = np.empty_like(lo)
        lo[:Sa, 0], hi[:Sa, 0] = hi_l[0], np.inf
        lo[Sa:, 0], hi[Sa:, 0] = -np.inf, lo_l[0]
        for blk in (slice(0, Sa), slice(Sa, 2 * Sa)):
            lo[blk, 1] = rows - 0.5 * h
            hi[blk, 1] = rows + 0.5 * h
        wts = K.box_integral(lo, hi, p, 0.0, nq=6)
        lat = lat_axes[0]
        right = np.take(ut, -1, axis=lat)
        left = np.take(ut, 0, axis=lat)
        return ext + np.sum(wts[:Sa] * (ui - right)) + np.sum(wts[Sa:] * (ui - left))
    # n == 3: per-row exterior of the lateral rectangle, valued by the ring mean
    xg, wg = K.gauss(4)
    wts = np.zeros(Sa)
    for xq, wq in zip(xg, wg):
        t = rows + 0.5 * h * xq
        wts += 0.5 * h * wq * K.rect_exterior_2d(np.broadcast_to(lo_l, (Sa, 2)),
                                                 np.broadcast_to(hi_l, (Sa, 2)), t, p)
    moved = np.moveaxis(ut, ax, -1)
    ring = np.concatenate([moved[0, :, :], moved[-1, :, :], moved[1:-1, 0, :], moved[1:-1, -1, :]], axis=0)
    return ext + np.sum(wts * (ui - ring.mean(axis=0)))


def _edge_exterior(u, s, ut, idx, P, ui):
    n, h = u.dim, u.spacing
    lo_d = [-(idx[d] + P + 0.5) * h for d in range(n)]
    hi_d = [(u.shape[d] - 1 - idx[d] + P + 0.5) * h for d in range(n)]
    if n == 1:
        return ((ui - ut[-1]) * hi_d[0] ** (-2 * s) + (ui - ut[0]) * (-lo_d[0]) ** (-2 * s)) / (2 * s)
    if n != 2:
        raise ContractError("edge tails support n = 1, 2")
    p = 1.0 + s
    ext = 0.0
    for d in (0, 1):
        o = 1 - d
        rows = (np.arange(ut.shape[o]) - (idx[o] + P)) * h
        for lim, side in ((hi_d[d], -1), (lo_d[d], 0)):
            lo = np.empty((rows.size, 2))
            hi = np.empty_like(lo)
            # the closed-form axis is the face-normal one
            lo[:, 0], hi[:, 0] = (lim, np.inf) if side == -1 else (-np.inf, lim)
            lo[:, 1], hi[:, 1] = rows - 0.5 * h, rows + 0.5 * h
            wts = K.box_integral(lo, hi, p, 0.0, nq=6)
            ext += np.sum(wts * (ui - np.take(ut, side, axis=d)))
    for a, sa in ((hi_d[0], -1), (-lo_d[0], 0)):
        for b, sb in ((hi_d[1], -1), (-lo_d[1], 0)):
            mass = K.box_integral(np.array([a, b]), np.array([np.inf, np.inf]), p, 0.0, nq=16)
            ext += mass * (ui - ut[sa, sb])
    return ext


def _truncation_check(u: GridFunction, s: float, idx, mid_radius: float, budget: float):
    if u.tail.kind != "pm1":
        return
    n, h = u.dim, u.spacing
    ax = u.tail.axis % n
    dist = min(idx[ax], u.shape[ax] - 1 - idx[ax]) * h
    if dist >= mid_radius:
        return
    mis = u.tail_mismatch()
    d = dist + (NEAR_CELLS + 1.5) * h
    bound = 2.0 * frac_constant(n, s).value * mis * K.halfspace_factor(n, s) * d ** (-2 * s) / (2 * s)
    if bound > budget:
        raise TruncationBudgetError(
            f"point within {dist:.3g} of the box face; estimated tail truncation error {bound:.3e} "
            f"exceeds budget {budget:.1e}", bound)


def frac_laplacian(u: GridFunction, s: float, x, *, mid_radius: Optional[float] = None,
                   budget: float = 1e-3, max_second_diff: float = 0.5) -> float:
    """Pointwise (-Delta)^s u at ``x`` by direct quadrature.

    Nodes are evaluated exactly by the stencil; off-node points use cubic
    Lagrange interpolation of the values at the 4^n surrounding nodes.
    """
    _check_s(s)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.size != u.dim:
        raise ContractError("point dimension mismatch")
    fi = u.index_of(x)
    shape = np.array(u.shape)
    periodic = u.tail.kind == "periodic"
    if not periodic and (np.any(fi <= 0) or np.any(fi >= shape - 1)):
        raise ContractError("x must lie strictly inside the sampled box")
    if mid_radius is None:
        mid_radius = 2 * (NEAR_CELLS + 0.5) * u.spacing
    near = np.round(fi)
    on_node = np.all(np.abs(fi - near) < 1e-9)
    if on_node:
        nodes = [tuple(near.astype(int))]
        coeffs = [1.0]
    else:
        base = np.floor(fi).astype(int) - 1
        offs = [np.arange(4) for _ in range(u.dim)]
        nodes, coeffs = [], []
        lag = []
        for d in range(u.dim):
            t = fi[d] - base[d]
            lag.append([np.prod([(t - k) / (j - k) for k in range(4) if k != j]) for j in range(4)])
        for o in np.ndindex(*(4,) * u.dim):
            node = tuple(base + np.array(o))
            if periodic:
                node = tuple(np.mod(node, shape))
            elif np.any(np.array(node) < 1) or np.any(np.array(node) > shape - 2):
                raise ContractError("x too close to the box boundary for interpolation")
            nodes.append(node)
            coeffs.append(np.prod([lag[d][o[d]] for d in range(u.dim)]))
    for node in nodes:
        if not periodic:
            _truncation_check(u, s, node, mid_radius, budget)
    _check_second_differences(u, nodes[0], max_second_diff)
    return float(sum(cf * _pointwise_node(u, s, node) for cf, node in zip(coeffs, nodes)))


def _check_second_differences(u: GridFunction, node, bound):
    sl = tuple(slice(max(i - 3, 0), i + 4) for i in node)
    patch = u.values[sl]
    for d in range(u.dim):
        if patch.shape[d] >= 3:
            dd = np.diff(patch, 2, axis=d)
            if np.max(np.abs(dd)) > bound:
                raise ContractError("u is not resolved near x (second differences exceed bound)")


def frac_laplacian_spectral(u: GridFunction, s: float) -> GridFunction:
    """Fourier-multiplier oracle |k|^{2s} for periodic grids of power-of-two size."""
    _check_s(s)
    if u.tail.kind != "periodic":
        raise ContractError("spectral evaluation requires a periodic tail")
    for N in u.shape:
        if N & (N - 1):
            raise ContractError("grid size must be a power of two per axis")
    ks = np.meshgrid(*[2 * np.pi * sfft.fftfreq(N, u.spacing) for N in u.shape], indexing="ij")
    k2 = sum(k ** 2 for k in ks)
    mult = k2 ** s
    out = np.real(sfft.ifftn(sfft.fftn(u.values) * mult))
    return u.with_values(out)
