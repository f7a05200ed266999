"""Seedable path simulation: grids, per-path noise substreams, Euler stepping,
and the pathwise functionals the profit and variation checks need.

Reproducibility contract: every random number is drawn from a counter-based
Philox stream keyed by (master seed, domain, path index) through numpy's
SeedSequence spawn keys.  A path's increments depend only on that key and the
position in the stream, never on how paths are batched, so results are
bit-identical regardless of block sizes or worker counts as long as
reductions run in path order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

__all__ = [
    "TimeGrid",
    "NoiseStream",
    "PathBundle",
    "SimConfig",
    "PathDivergenceError",
    "DivergenceBudgetError",
    "make_grid",
    "brownian_bundle",
    "euler_maruyama",
    "euler_bundle",
    "quadratic_variation",
    "discounted_integral",
    "pathwise_integral_dx",
    "increment_blocks",
    "substream_normals",
    "DOMAIN_BROWNIAN",
    "DOMAIN_PAYOFF",
    "DOMAIN_ANNOUNCE",
    "DOMAIN_BRIDGE",
    "DEFAULT_BLOCK_PATHS",
]

# Substream domains; distinct domains never share random numbers.
DOMAIN_BROWNIAN = 0
DOMAIN_PAYOFF = 1
DOMAIN_ANNOUNCE = 2
DOMAIN_BRIDGE = 3

# Fixed so that block layout is part of neither the draw nor the reduction order.
DEFAULT_BLOCK_PATHS = 8192


class PathDivergenceError(RuntimeError):
    """A simulated path left the finite range; carries the offending step."""

    def __init__(self, step: int):
        super().__init__(f"path diverged (non-finite state) at step {step}")
        self.step = step


class DivergenceBudgetError(RuntimeError):
    """More than the tolerated fraction of paths diverged in a bundle."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t0, t0 + dt, ..., t0 + n_steps * dt."""

    t0: float
    dt: float
    n_steps: int

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    @property
    def t_end(self) -> float:
        return self.t0 + self.dt * self.n_steps

    def index_of(self, t: float) -> int:
        """Index of a grid time, rejecting off-grid requests."""
        k = round((t - self.t0) / self.dt)
        if k < 0 or k > self.n_steps or abs(self.t0 + k * self.dt - t) > 1e-6 * self.dt:
            raise ValueError(f"time {t} is not on the grid (dt={self.dt})")
        return int(k)


def make_grid(t_end: float, dt: float, t0: float = 0.0) -> TimeGrid:
    """Grid covering [t0, t_end] with uniform step dt; n_steps = ceil(span/dt)."""
    if t_end <= t0:
        raise ValueError(f"t_end must exceed t0, got {t_end} <= {t0}")
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    # The 1e-9 guard keeps e.g. 8 / 1e-3 from rounding up to 8001 steps.
    n_steps = int(np.ceil((t_end - t0) / dt - 1e-9))
    return TimeGrid(t0=t0, dt=dt, n_steps=max(n_steps, 1))


@dataclass(frozen=True)
class NoiseStream:
    """Counter-based substream identity (seed, path_index, domain)."""

    seed: int
    path_index: int
    domain: int = DOMAIN_BROWNIAN

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.seed, spawn_key=(self.domain, self.path_index))
        return np.random.Generator(np.random.Philox(seq))

    def normals(self, n: int) -> np.ndarray:
        return self.generator().standard_normal(n)

    def increments(self, grid: TimeGrid) -> np.ndarray:
        """Brownian increments with variance dt per step."""
        return np.sqrt(grid.dt) * self.normals(grid.n_steps)


def substream_normals(seed: int, domain: int, path_slice: range, n: int) -> np.ndarray:
    """(len(path_slice), n) standard normals, row i from substream path_slice[i]."""
    out = np.empty((len(path_slice), n))
    for row, path_index in enumerate(path_slice):
        out[row] = NoiseStream(seed, path_index, domain).normals(n)
    return out


def increment_blocks(
    grid: TimeGrid, n_paths: int, seed: int, block_paths: int = DEFAULT_BLOCK_PATHS
) -> Iterator[tuple[slice, np.ndarray]]:
    """Yield (path slice, increments block) pairs covering all paths in order.

    Blocks bound peak memory; the values in each row depend only on the
    path's substream, not on the blocking.
    """
    sqrt_dt = np.sqrt(grid.dt)
    for start in range(0, n_paths, block_paths):
        stop = min(start + block_paths, n_paths)
        block = substream_normals(seed, DOMAIN_BROWNIAN, range(start, stop), grid.n_steps)
        block *= sqrt_dt
        yield slice(start, stop), block


@dataclass
class PathBundle:
    """Simulated paths on a shared grid, reproducible from (seed, stream_ids)."""

    grid: TimeGrid
    values: np.ndarray  # (n_paths, n_steps + 1)
    stream_ids: np.ndarray
    seed: int
    diverged: np.ndarray = field(default=None)  # bool per path

    def __post_init__(self):
        if self.diverged is None:
            self.diverged = np.zeros(self.values.shape[0], dtype=bool)

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=1)

    def at_time(self, t: float) -> np.ndarray:
        return self.values[:, self.grid.index_of(t)]


@dataclass(frozen=True)
class SimConfig:
    """Shared run configuration for bundle simulations."""

    t_end: float
    dt: float
    n_paths: int
    seed: int
    checkpoints: tuple = ()
    block_paths: int = DEFAULT_BLOCK_PATHS
    store_full: bool = False
    divergence_budget: float = 1e-3

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")

    def grid(self) -> TimeGrid:
        return make_grid(self.t_end, self.dt)

    def report_times(self) -> np.ndarray:
        """Checkpoints with t_end appended when absent, all validated on-grid."""
        grid = self.grid()
        times = list(self.checkpoints)
        if not any(abs(t - grid.t_end) <= 1e-9 for t in times):
            times.append(grid.t_end)
        for t in times:
            grid.index_of(t)
        return np.asarray(sorted(times), dtype=float)


def brownian_bundle(grid: TimeGrid, n_paths: int, seed: int) -> PathBundle:
    """Brownian paths from 0 with i.i.d. N(0, dt) increments per path."""
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    values = np.empty((n_paths, grid.n_steps + 1))
    values[:, 0] = 0.0
    for sl, block in increment_blocks(grid, n_paths, seed):
        np.cumsum(block, axis=1, out=values[sl, 1:])
    return PathBundle(grid=grid, values=values, stream_ids=np.arange(n_paths), seed=seed)


def euler_maruyama(
    drift: Callable[[float, float], float],
    diffusion: Callable[[float, float], float],
    x0: float,
    grid: TimeGrid,
    stream: NoiseStream,
) -> np.ndarray:
    """Single-path Euler scheme x_{k+1} = x_k + drift dt + diffusion dB.

    Raises PathDivergenceError (carrying the step index) if the state leaves
    the finite range.
    """
    db = stream.increments(grid)
    path = np.empty(grid.n_steps + 1)
    path[0] = x0
    x = x0
    t = grid.t0
    for k in range(grid.n_steps):
        x = x + drift(t, x) * grid.dt + diffusion(t, x) * db[k]
        if not np.isfinite(x):
            raise PathDivergenceError(k)
        path[k + 1] = x
        t += grid.dt
    return path


def euler_bundle(
    drift: Callable[[float, np.ndarray], np.ndarray],
    diffusion: Callable[[float, np.ndarray], np.ndarray],
    x0,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    block_paths: int = DEFAULT_BLOCK_PATHS,
) -> PathBundle:
    """Vectorized Euler bundle; diverged paths are frozen at NaN and flagged."""
    values = np.empty((n_paths, grid.n_steps + 1))
    diverged = np.zeros(n_paths, dtype=bool)
    times = grid.times
    for sl, block in increment_blocks(grid, n_paths, seed, block_paths):
        x = np.full(sl.stop - sl.start, x0, dtype=float)
        values[sl, 0] = x
        for k in range(grid.n_steps):
            t = times[k]
            x = x + drift(t, x) * grid.dt + diffusion(t, x) * block[:, k]
            values[sl, k + 1] = x
        diverged[sl] = ~np.isfinite(x)
    return PathBundle(
        grid=grid,
        values=values,
        stream_ids=np.arange(n_paths),
        seed=seed,
        diverged=diverged,
    )


def check_divergence_budget(n_diverged: int, n_paths: int, budget: float = 1e-3):
    if n_paths > 0 and n_diverged / n_paths > budget:
        raise DivergenceBudgetError(
            f"{n_diverged}/{n_paths} paths diverged (> {budget:.2%} budget)"
        )


def quadratic_variation(path, axis: int = -1):
    """Sum of squared increments along a path (or per row of a path matrix)."""
    path = np.asarray(path, dtype=float)
    if path.shape[axis] < 2:
        raise ValueError("path needs at least 2 points")
    return np.sum(np.diff(path, axis=axis) ** 2, axis=axis)


def _left_endpoint(values, n_steps: int) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.shape[-1] == n_steps + 1:
        return values[..., :-1]
    if values.shape[-1] == n_steps:
        return values
    raise ValueError(
        f"integrand length {values.shape[-1]} does not align with {n_steps} steps"
    )


def discounted_integral(integrand, r: float, grid: TimeGrid):
    """Left-endpoint Riemann sum of e^{-rt} * integrand * dt over the grid."""
    vals = _left_endpoint(integrand, grid.n_steps)
    discount = np.exp(-r * grid.times[:-1])
    return np.sum(vals * discount, axis=-1) * grid.dt


def pathwise_integral_dx(g, path):
    """Left-endpoint stochastic integral sum g_k (x_{k+1} - x_k)."""
    path = np.asarray(path, dtype=float)
    dx = np.diff(path, axis=-1)
    vals = _left_endpoint(g, dx.shape[-1])
    return np.sum(vals * dx, axis=-1)
