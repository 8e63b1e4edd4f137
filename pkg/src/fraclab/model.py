"""Bistable reaction terms and their double-well potentials.

A :class:`Nonlinearity` bundles the reaction term ``f`` with the
structural data that the layer theory relies on: end zones of width
``kappa`` where ``f`` is strictly decreasing, the two integral sign
conditions, and the Hölder exponent of ``f'``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import Polynomial
from scipy import integrate


class QuadratureError(RuntimeError):
    """Adaptive quadrature did not reach the requested tolerance."""


@dataclass(frozen=True)
class Nonlinearity:
    f: Callable
    f_prime: Callable
    kappa: float
    c_kappa: float
    holder_alpha: float
    name: str = "custom"
    coeffs: tuple | None = None  # ascending powers, when polynomial

    def __call__(self, t):
        return self.f(t)

    def f_second(self, t):
        if self.coeffs is None:
            d = 1e-5
            return (self.f_prime(t + d) - self.f_prime(t - d)) / (2 * d)
        return Polynomial(self.coeffs).deriv(2)(t)


@dataclass(frozen=True)
class Potential:
    """F(t) = -int_{-1}^t f, with F'' = -f'."""

    nl: Nonlinearity
    F: Callable

    def __call__(self, t):
        return self.F(t)

    def second(self, t):
        return -self.nl.f_prime(t)


@dataclass
class ValidationReport:
    passed: bool
    checks: dict = field(default_factory=dict)
    integrals: dict = field(default_factory=dict)
    kappa: float = float("nan")
    c_kappa: float = float("nan")

    def failed(self) -> list[str]:
        return [k for k, ok in self.checks.items() if not ok]


def _end_zone_samples(kappa: float, num: int = 401) -> np.ndarray:
    lo = np.linspace(-1.0, -1.0 + kappa, num)
    return np.concatenate([lo, -lo])


def _end_zone_bound(f_prime: Callable, kappa: float) -> float:
    """min of -f' over both end zones (may be negative for invalid f)."""
    return float(np.min(-np.asarray(f_prime(_end_zone_samples(kappa)), dtype=float)))


def make_polynomial_nonlinearity(coeffs: Sequence[float], kappa: float = 0.3,
                                 name: str = "polynomial") -> Nonlinearity:
    """Nonlinearity from ascending polynomial coefficients.

    ``c_kappa`` is computed from the minimum of ``-f'`` over the end zones;
    an invalid ``f`` yields a nonpositive value that
    :func:`validate_bistable` flags.
    """
    p = Polynomial(np.asarray(coeffs, dtype=float))
    dp = p.deriv()
    # shave a hair off the sampled minimum so f' < -c_kappa holds strictly
    zone = _end_zone_bound(dp, kappa)
    c_kappa = zone * (1.0 - 1e-9) if zone > 0 else zone
    return Nonlinearity(f=p, f_prime=dp, kappa=kappa, c_kappa=c_kappa,
                        holder_alpha=1.0, name=name, coeffs=tuple(float(c) for c in p.coef))


def make_cubic_nonlinearity() -> Nonlinearity:
    """f(t) = t - t^3, the Allen-Cahn reaction term."""
    return make_polynomial_nonlinearity([0.0, 1.0, 0.0, -1.0], kappa=0.3, name="cubic")


def nonlinearity_from_name(name: str) -> Nonlinearity:
    if name.strip().lower() == "cubic":
        return make_cubic_nonlinearity()
    raise ValueError(f"unknown nonlinearity {name!r}")


def _integrate_f(nl: Nonlinearity, a: float, b: float, tol: float = 1e-10) -> float:
    if nl.coeffs is not None:
        anti = Polynomial(nl.coeffs).integ()
        return float(anti(b) - anti(a))
    val, err = integrate.quad(nl.f, a, b, epsabs=tol, epsrel=0.0, limit=200)
    if not np.isfinite(val) or err > 10 * tol:
        raise QuadratureError(f"integral of f on [{a}, {b}] not converged (err={err:.2e})")
    return float(val)


def make_potential(nl: Nonlinearity) -> Potential:
    if nl.coeffs is not None:
        anti = Polynomial(nl.coeffs).integ()
        shift = anti(-1.0)
        return Potential(nl, lambda t: shift - anti(np.asarray(t, dtype=float)))

    def F(t):
        t = np.asarray(t, dtype=float)
        out = np.array([-_integrate_f(nl, -1.0, float(ti)) for ti in t.ravel()])
        return out.reshape(t.shape) if t.ndim else float(out[0])

    return Potential(nl, F)


def potential(nl: Nonlinearity, t):
    """F(t) = -int_{-1}^t f(tau) dtau (vectorized over ``t``)."""
    return make_potential(nl)(t)


def validate_bistable(nl: Nonlinearity, s: float, tol: float = 1e-12) -> ValidationReport:
    if not 0.0 < s < 1.0:
        raise ValueError("s must lie in (0, 1)")
    i_plus = _integrate_f(nl, 0.0, 1.0)
    i_minus = _integrate_f(nl, -1.0, 0.0)
    zone = _end_zone_bound(nl.f_prime, nl.kappa)
    checks = {
        "roots": abs(float(nl.f(-1.0))) <= tol and abs(float(nl.f(1.0))) <= tol,
        # strict inequality against the recorded bound, with room for rounding
        "end_zones": nl.c_kappa > 0 and zone > nl.c_kappa,
        "sign_condition": i_plus > 0.0 > i_minus,
        "holder": nl.holder_alpha > 1.0 - 2.0 * s,
    }
    return ValidationReport(
        passed=all(checks.values()), checks=checks,
        integrals={"int_0^1 f": i_plus, "int_-1^0 f": i_minus},
        kappa=nl.kappa, c_kappa=nl.c_kappa,
    )
