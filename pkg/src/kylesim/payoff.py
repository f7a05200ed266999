"""Payoff specifications for the general-distribution market.

A payoff is Gamma = f(eta) for a continuous, strictly increasing f applied to
a standard normal draw.  The equilibrium construction needs f to satisfy the
growth bound |f(y)| <= K exp(k y^2 / 4) with k < 1/(1 + 2r); validate_payoff
checks monotonicity and that bound on a test grid and reports the first
violating point.

Built-ins cover identity, affine, and a softplus-like monotone test function;
arbitrary monotone payoffs load from two-column CSV tables (y, f(y)) as
piecewise-linear interpolants with end-slope extrapolation.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

__all__ = [
    "PayoffSpec",
    "PayoffValidation",
    "identity_payoff",
    "affine_payoff",
    "softplus_payoff",
    "table_payoff",
    "table_payoff_from_csv",
    "validate_payoff",
    "resolve_payoff",
]


@dataclass(frozen=True)
class PayoffSpec:
    """Strictly increasing payoff map with inverse and growth constants."""

    name: str
    f: Callable[[np.ndarray], np.ndarray]
    f_inv: Callable[[np.ndarray], np.ndarray]
    f_prime: Optional[Callable[[np.ndarray], np.ndarray]] = None
    growth_K: float = 2.0
    growth_k: float = 0.05

    def __post_init__(self):
        if self.growth_K <= 0.0:
            raise ValueError("growth_K must be positive")


@dataclass(frozen=True)
class PayoffValidation:
    ok: bool
    message: str
    bad_point: Optional[float] = None


# For linear-growth payoffs any exponent k > 0 certifies the bound once K
# covers sup |y| e^{-k y^2/4} = sqrt(2/k) e^{-1/2}; k = 0.05 keeps the
# built-ins admissible for rates up to r = 9.5 with K ~ 4 per unit slope.
_K_UNIT_SLOPE = 4.0
_K_DEFAULT = 0.05


def identity_payoff() -> PayoffSpec:
    return PayoffSpec(
        name="identity",
        f=lambda y: np.asarray(y, dtype=float),
        f_inv=lambda v: np.asarray(v, dtype=float),
        f_prime=lambda y: np.ones_like(np.asarray(y, dtype=float)),
        growth_K=_K_UNIT_SLOPE,
        growth_k=_K_DEFAULT,
    )


def affine_payoff(slope: float = 2.0, intercept: float = 1.0) -> PayoffSpec:
    if slope <= 0.0:
        raise ValueError("slope must be positive for a strictly increasing payoff")
    return PayoffSpec(
        name=f"affine({slope},{intercept})",
        f=lambda y: slope * np.asarray(y, dtype=float) + intercept,
        f_inv=lambda v: (np.asarray(v, dtype=float) - intercept) / slope,
        f_prime=lambda y: np.full_like(np.asarray(y, dtype=float), slope),
        growth_K=_K_UNIT_SLOPE * slope + abs(intercept) + 1.0,
        growth_k=_K_DEFAULT,
    )


def softplus_payoff(scale: float = 1.0) -> PayoffSpec:
    """f(y) = scale * log(1 + e^y): positive, increasing, asymptotically linear."""
    if scale <= 0.0:
        raise ValueError("scale must be positive")

    def f(y):
        y = np.asarray(y, dtype=float)
        return scale * (np.logaddexp(0.0, y))

    def f_inv(v):
        v = np.asarray(v, dtype=float)
        if np.any(v <= 0.0):
            raise ValueError("softplus payoff takes positive values only")
        w = v / scale
        # log(e^w - 1), stable for both small and large w
        return np.where(w > 30.0, w, np.log(np.expm1(np.minimum(w, 30.0))))

    def f_prime(y):
        y = np.asarray(y, dtype=float)
        return scale / (1.0 + np.exp(-y))

    return PayoffSpec(
        name=f"softplus({scale})",
        f=f,
        f_inv=f_inv,
        f_prime=f_prime,
        growth_K=(_K_UNIT_SLOPE + 1.0) * scale,
        growth_k=_K_DEFAULT,
    )


def table_payoff(ys: np.ndarray, fs: np.ndarray, name: str = "table") -> PayoffSpec:
    """Monotone piecewise-linear payoff with end-slope linear extrapolation."""
    ys = np.asarray(ys, dtype=float)
    fs = np.asarray(fs, dtype=float)
    if ys.ndim != 1 or ys.size < 2 or ys.shape != fs.shape:
        raise ValueError("table needs two equal-length columns with >= 2 rows")
    if np.any(np.diff(ys) <= 0.0) or np.any(np.diff(fs) <= 0.0):
        raise ValueError("table columns must both be strictly increasing")
    slopes = np.diff(fs) / np.diff(ys)
    lo_slope, hi_slope = slopes[0], slopes[-1]

    def f(y):
        y = np.asarray(y, dtype=float)
        out = np.interp(y, ys, fs)
        out = np.where(y < ys[0], fs[0] + lo_slope * (y - ys[0]), out)
        out = np.where(y > ys[-1], fs[-1] + hi_slope * (y - ys[-1]), out)
        return out

    def f_inv(v):
        v = np.asarray(v, dtype=float)
        out = np.interp(v, fs, ys)
        out = np.where(v < fs[0], ys[0] + (v - fs[0]) / lo_slope, out)
        out = np.where(v > fs[-1], ys[-1] + (v - fs[-1]) / hi_slope, out)
        return out

    def f_prime(y):
        y = np.asarray(y, dtype=float)
        idx = np.clip(np.searchsorted(ys, y, side="right") - 1, 0, slopes.size - 1)
        return slopes[idx]

    # Fit the growth certificate: |f| e^{-k y^2/4} peaks within |y| <= sqrt(2/k)
    # of the data range for linearly extrapolated tables, so a wide grid sup
    # with 10% headroom is a global bound.
    reach = max(np.abs(ys).max() + np.sqrt(2.0 / _K_DEFAULT), 2.0 * np.sqrt(2.0 / _K_DEFAULT))
    y_fit = np.linspace(-reach, reach, 2001)
    fitted = 1.1 * float(np.max(np.abs(f(y_fit)) * np.exp(-_K_DEFAULT * y_fit**2 / 4.0)))
    return PayoffSpec(
        name=name,
        f=f,
        f_inv=f_inv,
        f_prime=f_prime,
        growth_K=max(2.0, fitted),
        growth_k=_K_DEFAULT,
    )


def table_payoff_from_csv(path) -> PayoffSpec:
    """Load a monotone piecewise-linear payoff from CSV columns y, f(y)."""
    path = Path(path)
    raw = path.read_text().strip().splitlines()
    if not raw:
        raise ValueError(f"payoff table {path} is empty")
    start = 0
    first = raw[0].split(",")[0].strip()
    try:
        float(first)
    except ValueError:
        start = 1  # header row
    rows = [line.split(",") for line in raw[start:] if line.strip()]
    data = np.array([[float(a), float(b)] for a, b, *_ in rows])
    return table_payoff(data[:, 0], data[:, 1], name=f"table:{path.name}")


def validate_payoff(spec: PayoffSpec, r: float, grid=None) -> PayoffValidation:
    """Accept iff f is strictly increasing on the grid and the growth bound
    |f(y)| <= K e^{k y^2 / 4} holds there with k < 1/(1 + 2r)."""
    if grid is None:
        grid = np.linspace(-10.0, 10.0, 801)
    grid = np.asarray(grid, dtype=float)
    k_max = 1.0 / (1.0 + 2.0 * r)
    if not (0.0 < spec.growth_k < k_max):
        return PayoffValidation(
            False,
            f"growth exponent k={spec.growth_k} must lie in (0, 1/(1+2r)) = (0, {k_max:.6g})",
        )
    vals = np.asarray(spec.f(grid), dtype=float)
    increases = np.diff(vals) > 0.0
    if not increases.all():
        bad = float(grid[1:][~increases][0])
        return PayoffValidation(False, f"payoff not strictly increasing at y={bad:.6g}", bad)
    bound = spec.growth_K * np.exp(spec.growth_k * grid**2 / 4.0)
    violations = np.abs(vals) > bound
    if violations.any():
        bad = float(grid[violations][0])
        return PayoffValidation(
            False,
            f"growth bound K e^(k y^2/4) violated at y={bad:.6g}: "
            f"|f|={abs(vals[violations][0]):.6g} > {bound[violations][0]:.6g}",
            bad,
        )
    roundtrip = np.asarray(spec.f_inv(vals), dtype=float)
    if not np.allclose(roundtrip, grid, atol=1e-6, rtol=1e-6):
        bad = float(grid[np.argmax(np.abs(roundtrip - grid))])
        return PayoffValidation(False, f"f_inv does not invert f near y={bad:.6g}", bad)
    return PayoffValidation(True, "ok")


def resolve_payoff(ref: str) -> PayoffSpec:
    """Resolve a config payoff reference: builtin name, builtin(args), or table:path."""
    ref = ref.strip()
    if ref == "identity":
        return identity_payoff()
    if ref == "softplus":
        return softplus_payoff()
    if ref.startswith("softplus:"):
        return softplus_payoff(float(ref.split(":", 1)[1]))
    if ref.startswith("affine:"):
        parts = ref.split(":", 1)[1].split(",")
        if len(parts) != 2:
            raise ValueError("affine payoff reference must be affine:slope,intercept")
        return affine_payoff(float(parts[0]), float(parts[1]))
    if ref.startswith("table:"):
        return table_payoff_from_csv(ref.split(":", 1)[1])
    raise ValueError(f"unknown payoff reference {ref!r}")
