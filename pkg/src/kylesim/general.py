"""Equilibrium for general strictly-increasing payoffs Gamma = f(eta).

The market makers run the signal through a deterministic weight
sigma(t)^2 = 2r e^{-2rt} / (1 + 2r e^{-2rt}) (the constant C^2 = 2r is pinned
by requiring the signal's limit law to be standard normal) and price with

    h(t, y) = E[ f(Z) ],   Z ~ N( y sqrt(1 + 2r e^{-2rt}),  e^{-2rt} ),

evaluated by Gauss-Hermite quadrature with node doubling.  The insider turns
the signal into a pinned bridge: with a(t) = (1/2) log(1 + 2r e^{-2rt}) the
conditioned signal solves

    dY = sigma(t) dB + r sigma^2(t) (f^{-1}(v) - Y cosh a(t)) / sinh a(t) dt,

which is a time-changed mean-reverting bridge hitting f^{-1}(v) as t -> inf.
Everything below evaluates these objects in algebraically equivalent forms
that stay finite when e^{-2rt} underflows (sigma^2/sinh a -> 2, cosh a -> 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import sde
from .ou import TimeChange
from .payoff import PayoffSpec, validate_payoff
from .sde import SimConfig, check_divergence_budget, increment_blocks, substream_normals

__all__ = [
    "GeneralMarket",
    "QuadratureCfg",
    "GeneralRun",
    "pricing_h",
    "pricing_h_deriv",
    "pricing_h_inv",
    "bridge_drift",
    "insider_rate_general",
    "simulate_bridge",
    "simulate_general_equilibrium",
    "exact_bridge_samples",
    "value_J_general",
    "pde_residual_h",
    "pde_residual_value",
    "lambda_limit",
    "unconditional_variance",
]


@dataclass(frozen=True)
class QuadratureCfg:
    """Gauss-Hermite controls: node doubling from n_nodes until rel_tol."""

    n_nodes: int = 64
    variance_floor: float = 1e-12
    rel_tol: float = 1e-10
    max_nodes: int = 1024

    def __post_init__(self):
        if self.n_nodes < 16:
            raise ValueError("n_nodes must be >= 16")
        if self.variance_floor <= 0.0:
            raise ValueError("variance_floor must be positive")


@dataclass(frozen=True)
class GeneralMarket:
    """General-payoff market; the squared weight constant is pinned at 2r."""

    r: float
    payoff: PayoffSpec

    def __post_init__(self):
        if self.r <= 0.0:
            raise ValueError("rate r must be positive")
        check = validate_payoff(self.payoff, self.r)
        if not check.ok:
            raise ValueError(f"invalid payoff {self.payoff.name}: {check.message}")

    @property
    def tc(self) -> TimeChange:
        return TimeChange(r=self.r, c_sq=2.0 * self.r)


def _u(t, r):
    """u(t) = 2r e^{-2rt}; all coefficients below are rational in u."""
    return 2.0 * r * np.exp(-2.0 * r * np.asarray(t, dtype=float))


def _loading(t, r):
    """b(t) = sqrt(1 + 2r e^{-2rt}), the mean loading of the pricing Gaussian."""
    return np.sqrt(1.0 + _u(t, r))


@lru_cache(maxsize=16)
def _hermgauss(n: int):
    x, w = np.polynomial.hermite.hermgauss(n)
    return x, w / np.sqrt(np.pi)


def _gauss_expect(f, mean, sd, cfg: QuadratureCfg):
    """E[f(N(mean, sd^2))] elementwise over broadcast mean/sd arrays."""
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    n = cfg.n_nodes
    prev = None
    while True:
        x, w = _hermgauss(n)
        z = mean[..., None] + np.sqrt(2.0) * sd[..., None] * x
        val = np.asarray(f(z), dtype=float) @ w
        if prev is not None:
            err = np.max(np.abs(val - prev))
            if err <= cfg.rel_tol * max(1.0, float(np.max(np.abs(val)))):
                return val
        if n >= cfg.max_nodes:
            return val
        prev = val
        n *= 2


def pricing_h(t, y, market: GeneralMarket, cfg: QuadratureCfg = QuadratureCfg()):
    """Price h(t, y) = E f(Z), Z ~ N(y b(t), e^{-2rt}); strictly increasing in y.

    Variances below cfg.variance_floor short-circuit to f(y b(t)).
    """
    r = market.r
    y = np.asarray(y, dtype=float)
    mean = y * _loading(t, r)
    var = np.exp(-2.0 * r * np.asarray(t, dtype=float))
    if np.all(var < cfg.variance_floor):
        out = np.asarray(market.payoff.f(mean), dtype=float)
        return out if out.ndim else float(out)
    out = _gauss_expect(market.payoff.f, mean, np.sqrt(var), cfg)
    return out if out.ndim else float(out)


def pricing_h_deriv(t, y, market: GeneralMarket, cfg: QuadratureCfg = QuadratureCfg()):
    """Price impact h_y(t, y) = b(t) E[f'(Z)] (central differences without f')."""
    r = market.r
    y = np.asarray(y, dtype=float)
    b = _loading(t, r)
    if market.payoff.f_prime is not None:
        var = np.exp(-2.0 * r * np.asarray(t, dtype=float))
        if np.all(var < cfg.variance_floor):
            out = b * np.asarray(market.payoff.f_prime(y * b), dtype=float)
            return out if out.ndim else float(out)
        out = b * _gauss_expect(market.payoff.f_prime, y * b, np.sqrt(var), cfg)
        return out if out.ndim else float(out)
    h = 1e-4 * np.maximum(1.0, np.abs(y))
    vals = [pricing_h(t, y + k * h, market, cfg) for k in (-2, -1, 1, 2)]
    out = (vals[0] - 8 * vals[1] + 8 * vals[2] - vals[3]) / (12 * h)
    return out if np.ndim(out) else float(out)


def pricing_h_inv(t, v, market: GeneralMarket, cfg: QuadratureCfg = QuadratureCfg()):
    """Solve h(t, y) = v for y (vectorized Newton seeded at f^{-1}(v)/b(t)).

    Rejects v outside the reachable price range (bracket expansion fails).
    """
    r = market.r
    v = np.asarray(v, dtype=float)
    scalar = v.ndim == 0
    v = np.atleast_1d(v)
    t_arr = np.broadcast_to(np.asarray(t, dtype=float), v.shape).astype(float)
    b = _loading(t_arr, r)
    y = np.asarray(market.payoff.f_inv(v), dtype=float) / b

    lo, hi = _bracket(lambda yy: _h_pairs(t_arr, yy, market, cfg) - v, y)
    for _ in range(60):
        hv = _h_pairs(t_arr, y, market, cfg) - v
        lo = np.where(hv < 0.0, np.maximum(lo, y), lo)
        hi = np.where(hv > 0.0, np.minimum(hi, y), hi)
        dh = _h_deriv_pairs(t_arr, y, market, cfg)
        step = np.where(dh > 0.0, hv / np.where(dh > 0.0, dh, 1.0), 0.0)
        y_new = y - step
        outside = (y_new <= lo) | (y_new >= hi)
        y_new = np.where(outside, 0.5 * (lo + hi), y_new)
        if np.allclose(y_new, y, rtol=0.0, atol=1e-13 * np.maximum(1.0, np.abs(y)).max()):
            y = y_new
            break
        y = y_new
    return float(y[0]) if scalar else y


def _h_pairs(t_arr, y_arr, market, cfg):
    """h evaluated elementwise on paired (t, y) arrays."""
    r = market.r
    mean = np.asarray(y_arr, dtype=float) * _loading(t_arr, r)
    sd = np.exp(-r * np.asarray(t_arr, dtype=float))
    return _gauss_expect(market.payoff.f, mean, sd, cfg)


def _h_deriv_pairs(t_arr, y_arr, market, cfg):
    r = market.r
    b = _loading(t_arr, r)
    if market.payoff.f_prime is not None:
        sd = np.exp(-r * np.asarray(t_arr, dtype=float))
        return b * _gauss_expect(market.payoff.f_prime, np.asarray(y_arr) * b, sd, cfg)
    h = 1e-4 * np.maximum(1.0, np.abs(y_arr))
    vals = [_h_pairs(t_arr, y_arr + k * h, market, cfg) for k in (-2, -1, 1, 2)]
    return (vals[0] - 8 * vals[1] + 8 * vals[2] - vals[3]) / (12 * h)


def _bracket(g, y0, grow: float = 2.0, max_iter: int = 60):
    """Expand [y0 - w, y0 + w] geometrically until g changes sign elementwise."""
    y0 = np.asarray(y0, dtype=float)
    w = np.maximum(0.5, 0.1 * np.abs(y0))
    lo = y0 - w
    hi = y0 + w
    for _ in range(max_iter):
        glo = g(lo)
        ghi = g(hi)
        ok = (glo <= 0.0) & (ghi >= 0.0)
        if ok.all():
            return lo, hi
        lo = np.where(glo > 0.0, lo - grow * (hi - lo), lo)
        hi = np.where(ghi < 0.0, hi + grow * (hi - lo), hi)
    raise ValueError("price not attainable: bracket expansion failed")


def bridge_drift(t, y, v, market: GeneralMarket):
    """Drift of the conditioned signal under payoff value v.

    Algebraically r sigma^2(t) (f^{-1}(v) - y cosh a(t)) / sinh a(t) with
    a(t) = (1/2) log(1 + 2r e^{-2rt}); evaluated as
        2r f^{-1}(v) / sqrt(1+u) - r y (2+u)/(1+u),   u = 2r e^{-2rt},
    which stays finite for all t (including u underflowing to 0).
    """
    r = market.r
    u = _u(t, r)
    z = np.asarray(market.payoff.f_inv(v), dtype=float)
    y = np.asarray(y, dtype=float)
    return 2.0 * r * z / np.sqrt(1.0 + u) - r * y * (2.0 + u) / (1.0 + u)


def insider_rate_general(t, y, v, market: GeneralMarket):
    """Equilibrium trading rate r sigma(t) ((f^{-1}(v) - y cosh a)/sinh a - y).

    Consistent with bridge_drift: sigma alpha = drift - sigma^2 r y.
    """
    r = market.r
    tc = market.tc
    from .ou import sigma_sq

    s2 = sigma_sq(np.asarray(t, dtype=float), tc)
    sig = np.sqrt(s2)
    return (bridge_drift(t, y, v, market) - s2 * r * np.asarray(y, dtype=float)) / sig


def unconditional_variance(t, r: float):
    """Var Y_t of the payoff-mixed signal: (1 - e^{-2rt}) / (1 + 2r e^{-2rt})."""
    e = np.exp(-2.0 * r * np.asarray(t, dtype=float))
    return (1.0 - e) / (1.0 + 2.0 * r * e)


@dataclass
class GeneralRun:
    """Conditioned (or payoff-mixed) signal bundle at the report times."""

    market: GeneralMarket
    config: SimConfig
    times: np.ndarray
    z: np.ndarray  # bridge pins f^{-1}(Gamma), (n_paths,)
    gamma: np.ndarray
    tau: np.ndarray
    Y: np.ndarray
    X: np.ndarray
    P: np.ndarray  # h(t, Y_t)
    lam: np.ndarray  # h_y(t, Y_t)
    qv_X: np.ndarray
    diverged: np.ndarray
    profit_disc: np.ndarray | None = None
    profit_tau: np.ndarray | None = None
    int_P_pre_tau: np.ndarray | None = None
    P_pre_tau: np.ndarray | None = None
    deviation_factor: float = 1.0
    full_paths: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.z.size

    def index_of(self, t: float) -> int:
        hits = np.nonzero(np.abs(self.times - t) <= 1e-9)[0]
        if hits.size == 0:
            raise ValueError(f"time {t} is not a stored report time")
        return int(hits[0])

    def S(self) -> np.ndarray:
        before = self.times[None, :] < self.tau[:, None]
        return np.where(before, self.P, self.gamma[:, None])


def simulate_general_equilibrium(
    market: GeneralMarket,
    config: SimConfig,
    v=None,
    with_profit: bool = False,
    deviation_factor: float = 1.0,
    cfg: QuadratureCfg = QuadratureCfg(),
) -> GeneralRun:
    """Euler bundle of the conditioned signal.

    v = None draws eta ~ N(0,1) per path and conditions each path on its own
    payoff f(eta) (the payoff mixture); a fixed v pins every path at f^{-1}(v).
    with_profit additionally prices every step to accumulate the insider's
    discounted and announcement-stopped profits (quadratic cost in steps for
    table payoffs; cheap for the built-ins).
    """
    r = market.r
    grid = config.grid()
    times = grid.times
    report = config.report_times()
    report_idx = {grid.index_of(t): j for j, t in enumerate(report)}
    n_paths, m = config.n_paths, report.size

    if v is None:
        eta = sde.NoiseStream(config.seed, 0, sde.DOMAIN_PAYOFF).generator().standard_normal(n_paths)
        z_all = eta
        gamma = np.asarray(market.payoff.f(eta), dtype=float)
    else:
        z_all = np.full(n_paths, float(market.payoff.f_inv(v)))
        gamma = np.full(n_paths, float(v))
    tau = sde.NoiseStream(config.seed, 0, sde.DOMAIN_ANNOUNCE).generator().exponential(
        1.0 / r, size=n_paths
    )

    # Per-step coefficients: drift = cz * z + cy * Y, alpha = az * z + ay * Y.
    tk = times[:-1]
    u = _u(tk, r)
    root = np.sqrt(1.0 + u)
    sig2 = u / (1.0 + u)
    sig = np.sqrt(sig2)
    cz = 2.0 * r / root
    cy = -r * (2.0 + u) / (1.0 + u)
    az = cz / sig
    ay = (cy - sig2 * r) / sig
    disc = np.exp(-r * tk)
    dt = grid.dt
    c = float(deviation_factor)
    if c != 1.0:
        # Deviating insider: dY = sigma (dB + c alpha dt) + sigma^2 r Y dt.
        cz = c * sig * az
        cy = c * sig * ay + sig2 * r

    out = {name: np.empty((n_paths, m)) for name in ("Y", "X", "qv_X")}
    profit_disc = np.zeros(n_paths) if with_profit else None
    profit_tau = np.zeros(n_paths) if with_profit else None
    intP = np.empty((n_paths, m)) if with_profit else None
    P_pre_tau = np.empty(n_paths) if with_profit else None
    diverged = np.zeros(n_paths, dtype=bool)
    full = {}
    if config.store_full:
        full = {name: np.empty((n_paths, grid.n_steps + 1)) for name in ("Y", "X")}

    h0 = float(pricing_h(0.0, 0.0, market, cfg))
    for sl, db in increment_blocks(grid, n_paths, config.seed, config.block_paths):
        nb = sl.stop - sl.start
        z = z_all[sl]
        tau_b = tau[sl]
        Y = np.zeros(nb)
        X = np.zeros(nb)
        qv = np.zeros(nb)
        pd_b = np.zeros(nb)
        pt_b = np.zeros(nb)
        intP_b = np.zeros((nb, m)) if with_profit else None
        intP_acc = np.zeros(nb)
        p_pre = np.full(nb, h0)

        def snapshot(k, Y=Y, X=X, qv=qv, sl=sl):
            j = report_idx[k]
            out["Y"][sl, j] = Y
            out["X"][sl, j] = X
            out["qv_X"][sl, j] = qv
            if with_profit:
                intP_b[:, j] = intP_acc

        if 0 in report_idx:
            snapshot(0)
        if config.store_full:
            full["Y"][sl, 0] = Y
            full["X"][sl, 0] = X

        for k in range(grid.n_steps):
            alpha = c * (az[k] * z + ay[k] * Y)
            if with_profit:
                price = _h_pairs(np.full(nb, tk[k]), Y, market, cfg)
                gap = gamma[sl] - price
                overlap = np.clip(tau_b - tk[k], 0.0, dt)
                pd_b += disc[k] * gap * alpha * dt
                pt_b += gap * alpha * overlap
                intP_acc += price * overlap
                alive = tau_b > tk[k]
                p_pre[alive] = price[alive]
            dX = db[:, k] + alpha * dt
            X += dX
            qv += dX * dX
            Y += (cz[k] * z + cy[k] * Y) * dt + sig[k] * db[:, k]
            if config.store_full:
                full["Y"][sl, k + 1] = Y
                full["X"][sl, k + 1] = X
            if k + 1 in report_idx:
                bad = ~np.isfinite(Y)
                if bad.any():
                    diverged[sl] |= bad
                snapshot(k + 1)

        if with_profit:
            profit_disc[sl] = pd_b
            profit_tau[sl] = pt_b
            intP[sl] = intP_b
            P_pre_tau[sl] = p_pre

    check_divergence_budget(int(diverged.sum()), n_paths, config.divergence_budget)

    # Price and impact along the stored grid.
    P = np.empty((n_paths, m))
    lam = np.empty((n_paths, m))
    for j, t in enumerate(report):
        P[:, j] = pricing_h(t, out["Y"][:, j], market, cfg)
        lam[:, j] = pricing_h_deriv(t, out["Y"][:, j], market, cfg)

    return GeneralRun(
        market=market,
        config=config,
        times=report,
        z=z_all,
        gamma=gamma,
        tau=tau,
        Y=out["Y"],
        X=out["X"],
        P=P,
        lam=lam,
        qv_X=out["qv_X"],
        diverged=diverged,
        profit_disc=profit_disc,
        profit_tau=profit_tau,
        int_P_pre_tau=intP,
        P_pre_tau=P_pre_tau,
        deviation_factor=c,
        full_paths=full,
    )


def simulate_bridge(
    v,
    market: GeneralMarket,
    config: SimConfig,
    cfg: QuadratureCfg = QuadratureCfg(),
) -> tuple[GeneralRun, np.ndarray]:
    """Conditioned bundle under a fixed payoff value v: Euler run plus the
    exact sampler's matching matrix of signal values at the report times."""
    run = simulate_general_equilibrium(market, config, v=v, cfg=cfg)
    z = float(market.payoff.f_inv(v))
    exact = exact_bridge_samples(
        market, np.full(config.n_paths, z), run.times, config.n_paths, config.seed
    )
    return run, exact


def exact_bridge_samples(
    market: GeneralMarket, z: np.ndarray, times, n_paths: int, seed: int
) -> np.ndarray:
    """Draw the conditioned signal exactly at the given times.

    In the changed clock the signal is a mean-reverting bridge pinned at z,
    so consecutive values are jointly Gaussian; with u_j = 2r e^{-2r t_j} and
    q_j = 1 + u_j the step from t_{j-1} to t_j has

        mean = R sqrt(q_{j-1}/q_j) + b_j (u_{j-1}-u_j)/(q_j u_{j-1}) (z - b_{j-1} R)
        var  = (u_{j-1}-u_j) u_j / (2r q_j u_{j-1}),

    with b_j = sqrt(q_j).  Total: no time discretization error.
    """
    r = market.r
    times = np.asarray(times, dtype=float)
    if np.any(times <= 0.0):
        raise ValueError("exact sampler times must be positive")
    z = np.asarray(z, dtype=float)
    normals = substream_normals(seed, sde.DOMAIN_BRIDGE, range(n_paths), times.size)
    t_all = np.concatenate([[0.0], times])
    u = _u(t_all, r)
    q = 1.0 + u
    b = np.sqrt(q)
    R = np.zeros(n_paths)
    out = np.empty((n_paths, times.size))
    for j in range(1, t_all.size):
        decay = np.sqrt(q[j - 1] / q[j])
        pull = b[j] * (u[j - 1] - u[j]) / (q[j] * u[j - 1])
        var = (u[j - 1] - u[j]) * u[j] / (2.0 * r * q[j] * u[j - 1])
        R = R * decay + pull * (z - b[j - 1] * R) + np.sqrt(var) * normals[:, j - 1]
        out[:, j - 1] = R
    return out


# ---------------------------------------------------------------------------
# Value function and PDE residuals
# ---------------------------------------------------------------------------


def _tail_table(v, market: GeneralMarket, cfg: QuadratureCfg, s_hi: float, n: int = 16001):
    """Dense cumulative table of w(s) = e^{-rs} sigma(s) h_y(s, h^{-1}(s, v)).

    The integrand decays like e^{-rs} (growth bound on f), so truncating at
    s_hi with e^{-r s_hi} <= 1e-12 of the head contributes below the residual
    budgets.  Returns (s grid, cumulative integral from 0).
    """
    r = market.r
    s = np.linspace(0.0, s_hi, n)
    u = _u(s, r)
    sig = np.sqrt(u / (1.0 + u))
    y_inv = pricing_h_inv(s, np.full_like(s, float(v)), market, cfg)
    hy = _h_deriv_pairs(s, y_inv, market, cfg)
    w = np.exp(-r * s) * sig * hy
    cum = np.concatenate([[0.0], np.cumsum((w[1:] + w[:-1]) * 0.5 * np.diff(s))])
    return s, cum


def value_J_general(
    t,
    y,
    v,
    market: GeneralMarket,
    cfg: QuadratureCfg = QuadratureCfg(),
    n_quad: int = 128,
):
    """Insider value J(t, y) for payoff value v.

    J = int_{h^{-1}(t,v)}^y (h(t,x) - v)/sigma(t) dx
        + (1/2) e^{rt} int_t^inf e^{-rs} sigma(s) h_y(s, h^{-1}(s,v)) ds,

    first term by Gauss-Legendre, tail term from a dense trapezoid table
    truncated where e^{-rs} makes the integrand negligible.  Vectorized over
    broadcast (t, y)."""
    r = market.r
    t_arr, y_arr = np.broadcast_arrays(
        np.asarray(t, dtype=float), np.asarray(y, dtype=float)
    )
    scalar = t_arr.ndim == 0
    t_flat = np.atleast_1d(t_arr).ravel()
    y_flat = np.atleast_1d(y_arr).ravel()

    s_hi = float(np.max(t_flat)) + 30.0 / r
    s_grid, cum = _tail_table(v, market, cfg, s_hi)
    tail_at = np.interp(t_flat, s_grid, cum)
    tail = 0.5 * np.exp(r * t_flat) * (cum[-1] - tail_at)

    y_v = pricing_h_inv(t_flat, np.full_like(t_flat, float(v)), market, cfg)
    u = _u(t_flat, r)
    sig = np.sqrt(u / (1.0 + u))
    nodes, weights = np.polynomial.legendre.leggauss(n_quad)
    half = 0.5 * (y_flat - y_v)
    xs = y_v[:, None] + half[:, None] * (nodes + 1.0)
    hx = _h_pairs(np.repeat(t_flat, n_quad).reshape(xs.shape), xs, market, cfg)
    first = (hx - float(v)) @ weights * half / sig

    out = (first + tail).reshape(t_arr.shape)
    return float(out) if scalar else out


def pde_residual_h(
    t_grid,
    y_grid,
    market: GeneralMarket,
    cfg: QuadratureCfg = QuadratureCfg(),
    ht: float = 1e-3,
    hy: float = 1e-2,
):
    """Residual of h_t + (1/2) sigma^2 h_yy + sigma^2 r y h_y on a (t, y) grid.

    4th-order central differences; the steps are sized so quadrature noise
    (~rel_tol) stays below the stencil truncation error.  Interior grid only
    (t - 2 ht must stay positive)."""
    r = market.r
    t_grid = np.asarray(t_grid, dtype=float)
    y_grid = np.asarray(y_grid, dtype=float)
    if np.any(t_grid - 2 * ht < 0.0):
        raise ValueError("interior grid required: t - 2 ht must stay >= 0")
    tt, yy = np.meshgrid(t_grid, y_grid, indexing="ij")

    def h_at(dt_shift, dy_shift):
        return _h_pairs(tt + dt_shift, yy + dy_shift, market, cfg)

    h_t = (-h_at(2 * ht, 0) + 8 * h_at(ht, 0) - 8 * h_at(-ht, 0) + h_at(-2 * ht, 0)) / (
        12 * ht
    )
    h_y = (-h_at(0, 2 * hy) + 8 * h_at(0, hy) - 8 * h_at(0, -hy) + h_at(0, -2 * hy)) / (
        12 * hy
    )
    h_yy = (
        -h_at(0, 2 * hy)
        + 16 * h_at(0, hy)
        - 30 * h_at(0, 0)
        + 16 * h_at(0, -hy)
        - h_at(0, 2 * -hy)
    ) / (12 * hy**2)
    u = _u(tt, r)
    s2 = u / (1.0 + u)
    return h_t + 0.5 * s2 * h_yy + s2 * r * yy * h_y


def pde_residual_value(
    t_grid,
    y_grid,
    v,
    market: GeneralMarket,
    cfg: QuadratureCfg = QuadratureCfg(),
    ht: float = 2e-3,
    hy: float = 2e-2,
):
    """Residual of J_t + (1/2) sigma^2 J_yy + sigma^2 r y J_y - r J on a grid."""
    r = market.r
    t_grid = np.asarray(t_grid, dtype=float)
    y_grid = np.asarray(y_grid, dtype=float)
    if np.any(t_grid - 2 * ht < 0.0):
        raise ValueError("interior grid required: t - 2 ht must stay >= 0")
    tt, yy = np.meshgrid(t_grid, y_grid, indexing="ij")
    shifts_t = np.array([-2, -1, 0, 1, 2]) * ht
    shifts_y = np.array([-2, -1, 0, 1, 2]) * hy
    t_stack = np.stack([tt + s for s in shifts_t] + [tt] * 4)
    y_stack = np.stack([yy] * 5 + [yy + s for s in (shifts_y[0], shifts_y[1], shifts_y[3], shifts_y[4])])
    J = value_J_general(t_stack, y_stack, v, market, cfg)
    Jt = (J[0] - 8 * J[1] + 8 * J[3] - J[4]) / (12 * ht)
    J0 = J[2]
    Jy = (J[5] - 8 * J[6] + 8 * J[7] - J[8]) / (12 * hy)
    Jyy = (-J[5] + 16 * J[6] - 30 * J0 + 16 * J[7] - J[8]) / (12 * hy**2)
    u = _u(tt, r)
    s2 = u / (1.0 + u)
    return Jt + 0.5 * s2 * Jyy + s2 * r * yy * Jy - r * J0


def lambda_limit(market: GeneralMarket, cfg: QuadratureCfg = QuadratureCfg()) -> float:
    """Limit of the expected price impact: E[f'(Z)] for standard normal Z.

    Without f', the Stein identity E[f'(Z)] = E[Z f(Z)] is used (exact for
    the piecewise-linear table payoffs)."""
    if market.payoff.f_prime is not None:
        return float(_gauss_expect(market.payoff.f_prime, 0.0, 1.0, cfg))
    return float(
        _gauss_expect(lambda z: z * np.asarray(market.payoff.f(z)), 0.0, 1.0, cfg)
    )
