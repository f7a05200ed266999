"""Equilibrium for a two-point payoff: pricing rule, insider strategy, price
impact, value function, and the conditioned signal simulation.

With the payoff taking values {0, 1} and announced at an exponential(r) time,
the market makers price through the scale function s of the signal process
and the insider trades at rate

    alpha = Gamma * s'(Y)/s(Y) - (1 - Gamma) * s'(Y)/(1 - s(Y)),

which steers Y to +inf on [Gamma = 1] and to -inf on [Gamma = 0] while the
price P = s(Y) stays a martingale for the market.  The price impact along the
equilibrium is lambda(P) = s0'(s0^{-1}(P)), independent of the drift offset d.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfcx, ndtr, ndtri

from . import sde
from .ou import (
    OUParams,
    gauss_legendre_nodes,
    hazard_pair,
    scale_s,
    scale_s_deriv,
    scale_s_inv,
)
from .sde import SimConfig, check_divergence_budget, increment_blocks

__all__ = [
    "BernoulliMarket",
    "EquilibriumRun",
    "ProfitEstimate",
    "initial_y",
    "insider_rate",
    "equilibrium_drift",
    "kyle_lambda",
    "value_J",
    "ode_residual_J",
    "excessivity_residual",
    "lambda_mean_closed_form",
    "simulate_equilibrium",
    "expected_profit_mc",
]


@dataclass(frozen=True)
class BernoulliMarket:
    """Two-point payoff market: P(Gamma = 1) = p, signal parameters (r, d)."""

    p: float
    params: OUParams

    def __post_init__(self):
        if not (0.0 < self.p < 1.0):
            raise ValueError(f"p must lie in (0, 1), got {self.p}")

    @property
    def y0(self) -> float:
        return initial_y(self)


def initial_y(market: BernoulliMarket) -> float:
    """Signal start level: the unique y with s(y) = p."""
    return float(scale_s_inv(market.p, market.params))


def insider_rate(v, y, params: OUParams):
    """Equilibrium trading rate: +s'/s when v = 1, -s'/(1-s) when v = 0."""
    h_up, h_down = hazard_pair(y, params)
    v = np.asarray(v)
    return np.where(v == 1, h_up, -h_down)


def equilibrium_drift(v, y, params: OUParams):
    """Total signal drift r y + d + insider rate under payoff v."""
    return params.r * np.asarray(y, dtype=float) + params.d + insider_rate(v, y, params)


def kyle_lambda(price, r: float):
    """Price impact lambda(P) = s0'(s0^{-1}(P)), the depth reciprocal.

    Extended continuously by 0 at P in {0, 1}; maximal value sqrt(r/pi) at
    P = 1/2.  Does not depend on the drift offset d.
    """
    price = np.asarray(price, dtype=float)
    if np.any((price < 0.0) | (price > 1.0)):
        raise ValueError("price must lie in [0, 1]")
    out = np.zeros_like(price)
    interior = (price > 0.0) & (price < 1.0)
    q = ndtri(price[interior]) if interior.ndim else ndtri(price)
    out[interior] = np.sqrt(r / np.pi) * np.exp(-0.5 * q**2)
    return out if out.ndim else float(out)


def value_J(x, v: int, params: OUParams, n_quad: int = 128):
    """Expected discounted profit of the insider started at signal level x.

    J(x) = int_x^inf (1 - s) dy for v = 1 and int_{-inf}^x s dy for v = 0,
    evaluated by Gauss-Legendre after truncating where the Gaussian tail of
    the integrand falls below 1e-18.
    """
    if v not in (0, 1):
        raise ValueError("payoff value must be 0 or 1")
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    r, d = params.r, params.d
    # z = 9 puts the truncated Gaussian tail mass below 1e-18.
    reach = 9.0 / np.sqrt(2.0 * r)
    if v == 1:
        hi = np.maximum(reach - d / r, x + reach)
        nodes, weights = gauss_legendre_nodes(n_quad, x, hi)
        vals = 1.0 - scale_s(nodes, params)
    else:
        lo = np.minimum(-reach - d / r, x - reach)
        nodes, weights = gauss_legendre_nodes(n_quad, lo, x)
        vals = scale_s(nodes, params)
    out = np.sum(weights * vals, axis=-1)
    return float(out[0]) if scalar else out


def ode_residual_J(x_grid, v: int, params: OUParams):
    """Residual of (1/2) J'' + (rx + d) J' - r J with analytic J' = s - v, J'' = s'."""
    x = np.asarray(x_grid, dtype=float)
    s = scale_s(x, params)
    return (
        0.5 * scale_s_deriv(x, params)
        + (params.r * x + params.d) * (s - v)
        - params.r * value_J(x, v, params)
    )


def excessivity_residual(x_grid, v: int, params: OUParams):
    """Conditioned-generator residual: insider_rate(v, x) * (s(x) - v), <= 0."""
    x = np.asarray(x_grid, dtype=float)
    return insider_rate(v, x, params) * (scale_s(x, params) - v)


def lambda_mean_closed_form(t, market: BernoulliMarket) -> float:
    """E[lambda(P_t)] for the payoff-mixed bundle, canonical d = 0.

    In its own filtration the signal is the plain diffusion, so Y_t is
    Gaussian with mean y0 e^{rt} and variance (e^{2rt} - 1)/(2r), and for
    X ~ N(m, s2),

        E[s0'(X)] = sqrt(r/pi) exp(-r m^2 / (1 + 2 r s2)) / sqrt(1 + 2 r s2).
    """
    if market.params.d != 0.0:
        raise ValueError("closed form is stated for the canonical d = 0")
    r = market.params.r
    y0 = market.y0
    m = y0 * np.exp(r * np.asarray(t, dtype=float))
    s2 = np.expm1(2.0 * r * np.asarray(t, dtype=float)) / (2.0 * r)
    denom = 1.0 + 2.0 * r * s2
    out = np.sqrt(r / np.pi) * np.exp(-r * m**2 / denom) / np.sqrt(denom)
    return out if np.ndim(out) else float(out)


@dataclass
class EquilibriumRun:
    """Joint run of (Y, X, P, lambda) plus the announcement layer.

    Path variables are stored at the report times; profits, quadratic
    variation, and the pre-announcement price integrals are accumulated at
    full dt resolution while streaming.  S_t = P_t before tau and = Gamma
    after, on the stored grid.
    """

    market: BernoulliMarket
    config: SimConfig
    times: np.ndarray  # report times (m,)
    gamma: np.ndarray  # (n_paths,)
    tau: np.ndarray  # (n_paths,) exponential(r) announcement times
    Y: np.ndarray  # (n_paths, m)
    X: np.ndarray
    P: np.ndarray
    lam: np.ndarray
    qv_X: np.ndarray  # (n_paths, m) quadratic variation of X up to each time
    int_P_pre_tau: np.ndarray  # (n_paths, m)  int_0^t 1[s < tau] P_s ds
    P_pre_tau: np.ndarray  # (n_paths,) price at the last grid time before tau
    profit_disc: np.ndarray  # (n_paths,)  int_0^T e^{-rt} (v - P) alpha dt
    profit_tau: np.ndarray  # (n_paths,)  int_0^{tau ^ T} (v - P) alpha dt
    adm_integral: np.ndarray  # (n_paths,)  int_0^T e^{-rt} P^2 dt (admissibility)
    diverged: np.ndarray
    deviation_factor: float = 1.0
    full_paths: dict = field(default_factory=dict)  # name -> (n_paths, n_steps+1)

    @property
    def n_paths(self) -> int:
        return self.gamma.size

    def index_of(self, t: float) -> int:
        hits = np.nonzero(np.abs(self.times - t) <= 1e-9)[0]
        if hits.size == 0:
            raise ValueError(f"time {t} is not a stored report time")
        return int(hits[0])

    def S(self) -> np.ndarray:
        """Announced price on the stored grid."""
        before = self.times[None, :] < self.tau[:, None]
        return np.where(before, self.P, self.gamma[:, None])


def _draw_gamma(market: BernoulliMarket, v, n_paths: int, seed: int) -> np.ndarray:
    if v is None:
        u = sde.NoiseStream(seed, 0, sde.DOMAIN_PAYOFF).generator().random(n_paths)
        return (u < market.p).astype(float)
    if v not in (0, 1):
        raise ValueError("payoff value must be 0, 1, or None for the p-mixture")
    return np.full(n_paths, float(v))


def _draw_tau(r: float, n_paths: int, seed: int) -> np.ndarray:
    gen = sde.NoiseStream(seed, 0, sde.DOMAIN_ANNOUNCE).generator()
    return gen.exponential(1.0 / r, size=n_paths)


def simulate_equilibrium(
    market: BernoulliMarket,
    v,
    config: SimConfig,
    deviation_factor: float = 1.0,
) -> EquilibriumRun:
    """Simulate the equilibrium bundle under payoff v (0, 1, or None = mixed).

    Y follows the Euler scheme on the conditioned drift with unit diffusion;
    P = s(Y); lambda = s'(Y); X is reconstructed from dX = dB + alpha dt.  A
    deviation_factor c scales the insider's rate to c * alpha (the price rule
    stays fixed), which is the deviation family used by the optimality tests.
    The announcement time tau is drawn from an independent substream.
    """
    params = market.params
    r, d = params.r, params.d
    grid = config.grid()
    times = grid.times
    report = config.report_times()
    report_idx = {grid.index_of(t): j for j, t in enumerate(report)}
    n_paths, m = config.n_paths, report.size

    gamma = _draw_gamma(market, v, n_paths, config.seed)
    tau = _draw_tau(r, n_paths, config.seed)
    y0 = market.y0

    out = {
        name: np.empty((n_paths, m))
        for name in ("Y", "X", "P", "lam", "qv_X", "int_P_pre_tau")
    }
    P_pre_tau = np.empty(n_paths)
    profit_disc = np.zeros(n_paths)
    profit_tau = np.zeros(n_paths)
    adm = np.zeros(n_paths)
    diverged = np.zeros(n_paths, dtype=bool)
    full = {}
    if config.store_full:
        full = {name: np.empty((n_paths, grid.n_steps + 1)) for name in ("Y", "X", "P")}

    sqrt2r = np.sqrt(2.0 * r)
    g_haz = 2.0 * np.sqrt(r / np.pi)
    shift = d / r
    disc = np.exp(-r * times[:-1])
    dt = grid.dt
    c = float(deviation_factor)

    for sl, db in increment_blocks(grid, n_paths, config.seed, config.block_paths):
        nb = sl.stop - sl.start
        gam = gamma[sl]
        tau_b = tau[sl]
        sign = 1.0 - 2.0 * gam  # +1 on v=0 paths, -1 on v=1 paths
        Y = np.full(nb, y0)
        X = np.zeros(nb)
        qv = np.zeros(nb)
        intP = np.zeros(nb)
        p_pre = np.full(nb, market.p)
        pd_b = np.zeros(nb)
        pt_b = np.zeros(nb)
        adm_b = np.zeros(nb)

        def snapshot(k, Y=Y, X=X, qv=qv, intP=intP, sl=sl):
            j = report_idx[k]
            z = sqrt2r * (Y + shift)
            out["Y"][sl, j] = Y
            out["X"][sl, j] = X
            out["P"][sl, j] = ndtr(z)
            out["lam"][sl, j] = np.sqrt(r / np.pi) * np.exp(-0.5 * z**2)
            out["qv_X"][sl, j] = qv
            out["int_P_pre_tau"][sl, j] = intP

        if 0 in report_idx:
            snapshot(0)
        if config.store_full:
            full["Y"][sl, 0] = Y
            full["X"][sl, 0] = X
            full["P"][sl, 0] = market.p

        with np.errstate(over="ignore", invalid="ignore"):
            for k in range(grid.n_steps):
                t = times[k]
                z = sqrt2r * (Y + shift)
                P = ndtr(z)
                rate = -sign * (g_haz / erfcx(sign * z / np.sqrt(2.0)))
                alpha = c * rate
                gap = gam - P

                alive = tau_b > t
                p_pre[alive] = P[alive]
                overlap = np.clip(tau_b - t, 0.0, dt)

                pd_b += disc[k] * gap * alpha * dt
                pt_b += gap * alpha * overlap
                adm_b += disc[k] * P**2 * dt
                intP += P * overlap

                dX = db[:, k] + alpha * dt
                X += dX
                qv += dX * dX
                Y += (r * Y + d) * dt + dX

                if config.store_full:
                    full["Y"][sl, k + 1] = Y
                    full["X"][sl, k + 1] = X
                    full["P"][sl, k + 1] = ndtr(sqrt2r * (Y + shift))
                if k + 1 in report_idx:
                    bad = ~np.isfinite(Y)
                    if bad.any():
                        diverged[sl] |= bad
                    snapshot(k + 1)

        P_pre_tau[sl] = p_pre
        profit_disc[sl] = pd_b
        profit_tau[sl] = pt_b
        adm[sl] = adm_b

    check_divergence_budget(int(diverged.sum()), n_paths, config.divergence_budget)
    return EquilibriumRun(
        market=market,
        config=config,
        times=report,
        gamma=gamma,
        tau=tau,
        Y=out["Y"],
        X=out["X"],
        P=out["P"],
        lam=out["lam"],
        qv_X=out["qv_X"],
        int_P_pre_tau=out["int_P_pre_tau"],
        P_pre_tau=P_pre_tau,
        profit_disc=profit_disc,
        profit_tau=profit_tau,
        adm_integral=adm,
        diverged=diverged,
        deviation_factor=c,
        full_paths=full,
    )


@dataclass(frozen=True)
class ProfitEstimate:
    """Discounted-horizon and announcement-stopped profit estimators."""

    disc_mean: float
    disc_se: float
    tau_mean: float
    tau_se: float
    n_paths: int
    adm_mean: float  # empirical admissibility integral E int e^{-rt} P^2 dt

    def combined_se(self) -> float:
        return float(np.hypot(self.disc_se, self.tau_se))


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    n = x.size
    se = float(x.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return float(x.mean()), se


def expected_profit_mc(
    market: BernoulliMarket,
    v: int,
    config: SimConfig,
    deviation_factor: float = 1.0,
    run: EquilibriumRun | None = None,
) -> ProfitEstimate:
    """Monte Carlo insider profit under payoff v with strategy c * alpha.

    Returns both the discounted-horizon estimator int e^{-rt} (v - P) alpha dt
    and the undiscounted estimator stopped at the simulated announcement time;
    the two agree in expectation by the exponential-horizon identity.
    """
    if run is None:
        run = simulate_equilibrium(market, v, config, deviation_factor)
    keep = ~run.diverged
    disc_mean, disc_se = _mean_se(run.profit_disc[keep])
    tau_mean, tau_se = _mean_se(run.profit_tau[keep])
    return ProfitEstimate(
        disc_mean=disc_mean,
        disc_se=disc_se,
        tau_mean=tau_mean,
        tau_se=tau_se,
        n_paths=int(keep.sum()),
        adm_mean=float(run.adm_integral[keep].mean()),
    )
