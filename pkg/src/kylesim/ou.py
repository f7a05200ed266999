"""Closed-form machinery for the transient mean-reverting signal process.

The market makers' signal is a diffusion with generator

    A = (1/2) d^2/dx^2 + (r x + d) d/dx,    r > 0,

whose scale function

    s(x) = sqrt(r/pi) * int_{-inf}^x exp(-r (y + d/r)^2) dy

is the Gaussian CDF evaluated at sqrt(2r) (x + d/r).  Everything here is a
pure function of its inputs: the scale function and its derivative/inverse,
the tail-stable hazard ratios s'/s and s'/(1-s), the transition density,
the time-dependent weight sigma^2(t) = C^2 e^{-2rt} / (1 + C^2 e^{-2rt}) and
its clock V(t) = int_0^t sigma^2, plus residual evaluators for the ODEs the
pricing coefficients must satisfy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erfcx, ndtr, ndtri

__all__ = [
    "OUParams",
    "TimeChange",
    "DensityQuery",
    "DegenerateDensityError",
    "scale_s",
    "scale_s_deriv",
    "scale_s_inv",
    "hazard_pair",
    "ou_density",
    "gauss_kernel",
    "sigma_sq",
    "time_change_V",
    "time_change_V_inv",
    "ode_residual_phia",
    "ode_residual_pricing",
    "reduce_to_ou",
    "gauss_legendre_nodes",
]

_SQRT2 = np.sqrt(2.0)


class DegenerateDensityError(ValueError):
    """Transition density requested at zero elapsed time (point mass)."""


@dataclass(frozen=True)
class OUParams:
    """Mean-reversion rate r > 0 and drift offset d of the signal generator."""

    r: float
    d: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.r) and self.r > 0.0):
            raise ValueError(f"rate r must be finite and positive, got {self.r}")
        if not np.isfinite(self.d):
            raise ValueError(f"drift offset d must be finite, got {self.d}")

    @property
    def center(self) -> float:
        """Mode -d/r of the scale-function derivative."""
        return -self.d / self.r


@dataclass(frozen=True)
class TimeChange:
    """Deterministic clock V(t) = int_0^t sigma^2(s) ds with V(inf) finite.

    sigma^2(t) = c_sq e^{-2rt} / (1 + c_sq e^{-2rt}) and
    V(inf) = log(1 + c_sq) / (2r).
    """

    r: float
    c_sq: float

    def __post_init__(self):
        if not (np.isfinite(self.r) and self.r > 0.0):
            raise ValueError(f"rate r must be finite and positive, got {self.r}")
        if not (np.isfinite(self.c_sq) and self.c_sq > 0.0):
            raise ValueError(f"c_sq must be finite and positive, got {self.c_sq}")

    @property
    def v_inf(self) -> float:
        return np.log1p(self.c_sq) / (2.0 * self.r)


@dataclass(frozen=True)
class DensityQuery:
    """Elapsed time and endpoints for a transition-density evaluation."""

    t: float
    x: float
    y: float

    def __post_init__(self):
        if self.t < 0.0:
            raise ValueError(f"elapsed time must be nonnegative, got {self.t}")


def _z(x, params: OUParams):
    """Standardized coordinate sqrt(2r) (x + d/r)."""
    return np.sqrt(2.0 * params.r) * (np.asarray(x, dtype=float) + params.d / params.r)


def scale_s(x, params: OUParams):
    """Scale function s(x), strictly increasing from 0 to 1.

    Equals the standard-normal CDF at sqrt(2r) (x + d/r); the substitution
    u = sqrt(2r)(y + d/r) turns the defining integral into the normal CDF
    exactly.
    """
    return ndtr(_z(x, params))


def scale_s_deriv(x, params: OUParams):
    """s'(x) = sqrt(r/pi) exp(-r (x + d/r)^2), maximal at x = -d/r."""
    x = np.asarray(x, dtype=float)
    r = params.r
    return np.sqrt(r / np.pi) * np.exp(-r * (x + params.d / r) ** 2)


def scale_s_inv(p, params: OUParams):
    """Unique x with s(x) = p, for p in (0, 1).

    Seeded by the normal-quantile closed form, then polished with three
    bracket-safeguarded Newton steps (tolerance 1e-12 in x).
    """
    p_arr = np.asarray(p, dtype=float)
    if np.any((p_arr <= 0.0) | (p_arr >= 1.0)) or not np.all(np.isfinite(p_arr)):
        raise ValueError("probability must lie strictly inside (0, 1)")
    r = params.r
    x = ndtri(p_arr) / np.sqrt(2.0 * r) - params.d / r
    # The seed is already the exact root up to quantile roundoff; Newton with a
    # step clamp (half a bracket width per iteration) keeps it there.
    for _ in range(3):
        f = ndtr(_z(x, params)) - p_arr
        df = scale_s_deriv(x, params)
        step = np.where(df > 0.0, f / np.where(df > 0.0, df, 1.0), 0.0)
        step = np.clip(step, -1.0, 1.0)
        x = x - step
    return x if x.ndim else float(x)


def hazard_pair(x, params: OUParams):
    """Tail-stable evaluation of (s'/s, s'/(1-s)).

    Both ratios are written through the scaled complementary error function,
        s'/s     = 2 sqrt(r/pi) / erfcx(-z/sqrt(2)),
        s'/(1-s) = 2 sqrt(r/pi) / erfcx(+z/sqrt(2)),
    with z = sqrt(2r)(x + d/r), which never forms the 0/0 the naive ratio
    produces in the tails.  s'/s grows like 2r|x| as x -> -inf and decays to
    0 as x -> +inf (mirror for the second component).
    """
    z = _z(x, params)
    g = 2.0 * np.sqrt(params.r / np.pi)
    with np.errstate(over="ignore"):
        h_up = g / erfcx(-z / _SQRT2)
        h_down = g / erfcx(z / _SQRT2)
    return h_up, h_down


def gauss_kernel(t, x):
    """Centered Gaussian density q(t, x) = exp(-x^2 / 2t) / sqrt(2 pi t)."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0.0):
        raise ValueError("variance must be positive")
    x = np.asarray(x, dtype=float)
    return np.exp(-(x**2) / (2.0 * t)) / np.sqrt(2.0 * np.pi * t)


def ou_density(q: DensityQuery, r: float):
    """Transition density p(t, x, y) of the signal with d = 0.

    p(t, x, y) = q((e^{2rt} - 1) / 2r, y - x e^{rt}).  t = 0 is a point mass
    and raises DegenerateDensityError.
    """
    if q.t == 0.0:
        raise DegenerateDensityError("transition density at t = 0 is a point mass")
    var = np.expm1(2.0 * r * q.t) / (2.0 * r)
    return gauss_kernel(var, q.y - q.x * np.exp(r * q.t))


def sigma_sq(t, tc: TimeChange):
    """Squared weight sigma^2(t) = c_sq e^{-2rt} / (1 + c_sq e^{-2rt})."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0.0):
        raise ValueError("time must be nonnegative")
    u = tc.c_sq * np.exp(-2.0 * tc.r * t)
    out = u / (1.0 + u)
    return out if out.ndim else float(out)


def time_change_V(t, tc: TimeChange):
    """Clock V(t) = log((1 + c_sq) / (1 + c_sq e^{-2rt})) / (2r)."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0.0):
        raise ValueError("time must be nonnegative")
    u = tc.c_sq * np.exp(-2.0 * tc.r * t)
    out = (np.log1p(tc.c_sq) - np.log1p(u)) / (2.0 * tc.r)
    return out if out.ndim else float(out)


def time_change_V_inv(u, tc: TimeChange):
    """Inverse clock: the t with V(t) = u, defined for 0 <= u < V(inf)."""
    u_arr = np.asarray(u, dtype=float)
    if np.any(u_arr < 0.0) or np.any(u_arr >= tc.v_inf):
        raise ValueError(f"changed time must lie in [0, V(inf)) = [0, {tc.v_inf})")
    # e^{-2rt} = ((1 + c_sq) e^{-2ru} - 1) / c_sq
    w = ((1.0 + tc.c_sq) * np.exp(-2.0 * tc.r * u_arr) - 1.0) / tc.c_sq
    out = -np.log(w) / (2.0 * tc.r)
    out = np.where(out < 0.0, 0.0, out)  # clamp -0.0 roundoff at u = 0
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Finite differences and quadrature helpers
# ---------------------------------------------------------------------------


def _fd_step(x):
    return np.maximum(1e-5, 1e-7 * np.abs(x))


def _fd1(f, x, h=None):
    """4th-order central first derivative."""
    h = _fd_step(x) if h is None else h
    return (-f(x + 2 * h) + 8 * f(x + h) - 8 * f(x - h) + f(x - 2 * h)) / (12 * h)


def _fd2(f, x, h=None):
    """4th-order central second derivative."""
    h = _fd_step(x) if h is None else h
    return (
        -f(x + 2 * h) + 16 * f(x + h) - 30 * f(x) + 16 * f(x - h) - f(x - 2 * h)
    ) / (12 * h**2)


def gauss_legendre_nodes(n: int, a, b):
    """Gauss-Legendre nodes/weights mapped to [a, b] (a, b broadcastable)."""
    xi, wi = np.polynomial.legendre.leggauss(n)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    half = 0.5 * (b - a)
    nodes = a[..., None] + half[..., None] * (xi + 1.0)
    weights = half[..., None] * wi
    return nodes, weights


def ode_residual_phia(a, phi, grid, params: OUParams, a_d1=None, a_d2=None, phi_d1=None):
    """Residual of the coefficient condition (1/2) a^2 a'' + a' phi + (r - phi') a.

    Derivatives are taken analytically when callables are supplied, otherwise
    by 4th-order central differences with step max(1e-5, 1e-7 |x|).
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size < 3:
        raise ValueError("grid needs at least 3 points")
    av = np.asarray(a(grid), dtype=float)
    if np.any(av <= 0.0):
        raise ValueError("weight function a must be positive on the grid")
    a1 = np.asarray(a_d1(grid) if a_d1 is not None else _fd1(a, grid), dtype=float)
    a2 = np.asarray(a_d2(grid) if a_d2 is not None else _fd2(a, grid), dtype=float)
    p1 = np.asarray(phi_d1(grid) if phi_d1 is not None else _fd1(phi, grid), dtype=float)
    return 0.5 * av**2 * a2 + a1 * np.asarray(phi(grid), dtype=float) + (params.r - p1) * av


def ode_residual_pricing(h, a, phi, grid, h_d1=None, h_d2=None):
    """Residual of the pricing condition (1/2) a^2 h'' + phi h' on a grid."""
    grid = np.asarray(grid, dtype=float)
    if grid.size < 3:
        raise ValueError("grid needs at least 3 points")
    h1 = np.asarray(h_d1(grid) if h_d1 is not None else _fd1(h, grid), dtype=float)
    h2 = np.asarray(h_d2(grid) if h_d2 is not None else _fd2(h, grid), dtype=float)
    av = np.asarray(a(grid), dtype=float)
    return 0.5 * av**2 * h2 + np.asarray(phi(grid), dtype=float) * h1


def reduce_to_ou(a, phi, c: float, path, dt: float, n_quad: int = 64):
    """Map a path of the (a, phi) diffusion to natural scale and estimate its
    drift slope.

    R = f(Y) with f(x) = int_c^x dy / a(y); when (a, phi) satisfy the
    coefficient condition, R has affine drift with slope r, estimated here by
    regressing the path increments on the current level.

    Returns (transformed path, slope estimate, slope standard error).
    """
    path = np.atleast_2d(np.asarray(path, dtype=float))
    nodes, weights = gauss_legendre_nodes(n_quad, np.full(path.size, c), path.ravel())
    vals = 1.0 / np.asarray(a(nodes), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise ValueError("1/a is not integrable on the path range")
    transformed = np.sum(weights * vals, axis=-1).reshape(path.shape)

    levels = transformed[:, :-1].ravel()
    increments = np.diff(transformed, axis=1).ravel()
    lev_c = levels - levels.mean()
    denom = np.dot(lev_c, lev_c)
    slope = np.dot(lev_c, increments) / denom / dt
    resid = increments - (increments.mean() + slope * dt * lev_c)
    dof = max(levels.size - 2, 1)
    slope_se = np.sqrt(np.dot(resid, resid) / dof / denom) / dt
    return transformed, float(slope), float(slope_se)
