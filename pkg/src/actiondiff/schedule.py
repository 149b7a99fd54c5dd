"""Time grids and noise schedules.

Every other module discretizes time on a :class:`TimeGrid` and reads the
drift rate beta(t) and diffusion coefficient D(t) from a
:class:`NoiseSchedule`. Rates are evaluated at the left endpoint of each
interval (Ito convention).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

RateFn = Callable[[np.ndarray], np.ndarray]


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    """Ordered time nodes t_0 < t_1 < ... < t_n."""

    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ScheduleError("a time grid needs at least two nodes")
        if not np.all(np.isfinite(nodes)):
            raise ScheduleError("time nodes must be finite")
        if np.any(np.diff(nodes) <= 0):
            raise ScheduleError("time nodes must be strictly increasing")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    @property
    def t_start(self) -> float:
        return float(self.nodes[0])

    @property
    def t_end(self) -> float:
        return float(self.nodes[-1])

    @property
    def n(self) -> int:
        """Number of steps."""
        return self.nodes.size - 1

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.nodes)

    def index_of(self, t: float, atol: float = 1e-12) -> int:
        """Index of the node equal to ``t``; raises if ``t`` is not a node."""
        i = int(np.argmin(np.abs(self.nodes - t)))
        if abs(self.nodes[i] - t) > atol * max(1.0, abs(t)):
            raise ScheduleError(f"time {t!r} is not a grid node")
        return i

    def slice(self, i0: int, i1: int) -> "TimeGrid":
        """Sub-grid with nodes i0..i1 inclusive."""
        return TimeGrid(self.nodes[i0 : i1 + 1])

    def refined(self, factor: int = 2) -> "TimeGrid":
        """Split every step into ``factor`` equal sub-steps."""
        parts = [np.linspace(a, b, factor + 1)[:-1] for a, b in zip(self.nodes[:-1], self.nodes[1:])]
        return TimeGrid(np.concatenate(parts + [self.nodes[-1:]]))


def make_time_grid(t_start: float, t_end: float, n: int, spacing: str = "uniform", ratio: float = 100.0) -> TimeGrid:
    """Build a grid of ``n`` steps on [t_start, t_end].

    ``spacing="geometric"`` makes consecutive steps grow by a constant factor
    so that ``steps[-1] / steps[0] == ratio``; nodes crowd toward t_start.
    """
    if not (math.isfinite(t_start) and math.isfinite(t_end)):
        raise ScheduleError("grid bounds must be finite")
    if t_end <= t_start:
        raise ScheduleError("t_end must exceed t_start")
    if int(n) != n or n < 1:
        raise ScheduleError("n must be a positive integer")
    n = int(n)
    length = t_end - t_start
    if spacing == "uniform":
        nodes = t_start + length * (np.arange(n + 1) / n)
    elif spacing == "geometric":
        if ratio <= 0:
            raise ScheduleError("ratio must be positive")
        if n == 1 or ratio == 1.0:
            return make_time_grid(t_start, t_end, n, "uniform")
        q = ratio ** (1.0 / (n - 1))
        # cumulative fraction of the series sum_{k<s} q^k / sum_{k<n} q^k
        frac = np.expm1(np.arange(n + 1) * math.log(q)) / math.expm1(n * math.log(q))
        nodes = t_start + length * frac
    else:
        raise ScheduleError(f"unknown spacing {spacing!r}")
    nodes[0] = t_start
    nodes[-1] = t_end
    return TimeGrid(nodes)


def constant(value: float) -> RateFn:
    """Rate function returning ``value`` at every time."""
    value = float(value)

    def rate(t):
        return np.full(np.shape(t), value)

    rate.constant_value = value
    return rate


def _evaluate(fn: RateFn, t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return np.broadcast_to(np.asarray(fn(t), dtype=float), t.shape).copy()


@dataclass(frozen=True)
class NoiseSchedule:
    """Drift rate beta(t), diffusion D(t) and the discrete alpha products.

    ``alpha_step[s] = 1 - beta(t_s) * dt_s`` for s < n and
    ``alpha_bar[s] = prod_{r < s} alpha_step[r]`` (so ``alpha_bar[0] == 1``).
    ``alpha_bar_exp`` holds the continuum surrogate exp(-sum_{r<s} beta(t_r) dt_r).
    """

    grid: TimeGrid
    beta: RateFn
    diffusion: RateFn
    kind: str = "ou"
    alpha_step: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)
    alpha_bar_exp: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        t = self.grid.nodes
        b = _evaluate(self.beta, t)
        d = _evaluate(self.diffusion, t)
        if np.any(~np.isfinite(b)) or np.any(b < 0):
            raise ScheduleError("beta must be finite and non-negative on the grid")
        if np.any(~np.isfinite(d)) or np.any(d < 0):
            raise ScheduleError("diffusion must be finite and non-negative on the grid")
        beta_steps = b[:-1] * self.grid.steps
        if np.any(beta_steps >= 1.0):
            s = int(np.argmax(beta_steps >= 1.0))
            raise ScheduleError(
                f"beta(t_s)*dt_s = {beta_steps[s]:.3g} >= 1 at step {s}; refine the grid"
            )
        alpha = 1.0 - beta_steps
        alpha_bar = np.concatenate([[1.0], np.cumprod(alpha)])
        alpha_bar_exp = np.exp(-np.concatenate([[0.0], np.cumsum(beta_steps)]))
        for arr in (alpha, alpha_bar, alpha_bar_exp):
            arr.setflags(write=False)
        object.__setattr__(self, "alpha_step", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        object.__setattr__(self, "alpha_bar_exp", alpha_bar_exp)

    @property
    def beta_steps(self) -> np.ndarray:
        """Per-step noise fractions beta_{t_s} = beta(t_s) * dt_s."""
        return 1.0 - self.alpha_step

    def beta_at(self, t) -> np.ndarray:
        return _evaluate(self.beta, t)

    def diffusion_at(self, t) -> np.ndarray:
        return _evaluate(self.diffusion, t)

    def _trapezoid(self, fn: RateFn, t0: float, t1: float) -> float:
        if t1 < t0:
            raise ScheduleError("integration bounds reversed")
        if t1 == t0:
            return 0.0
        inner = self.grid.nodes[(self.grid.nodes > t0) & (self.grid.nodes < t1)]
        pts = np.concatenate([[t0], inner, [t1]])
        vals = _evaluate(fn, pts)
        return float(np.sum(0.5 * (vals[1:] + vals[:-1]) * np.diff(pts)))

    def integrated_beta(self, t0: float, t1: float) -> float:
        """Trapezoid estimate of the integral of beta over [t0, t1] on the grid."""
        return self._trapezoid(self.beta, t0, t1)

    def integrated_diffusion(self, t0: float, t1: float) -> float:
        return self._trapezoid(self.diffusion, t0, t1)

    def alpha_bar_at(self, t: float) -> float:
        """Discrete alpha-bar at a grid node."""
        return float(self.alpha_bar[self.grid.index_of(t)])

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "t_nodes": self.grid.nodes.tolist(),
            "beta": self.beta_at(self.grid.nodes).tolist(),
            "diffusion": self.diffusion_at(self.grid.nodes).tolist(),
            "alpha_bar": self.alpha_bar.tolist(),
        }


def piecewise_constant(nodes: np.ndarray, values: np.ndarray) -> RateFn:
    """Left-continuous step function: value[s] on [t_s, t_{s+1})."""
    nodes = np.asarray(nodes, dtype=float)
    values = np.asarray(values, dtype=float)

    def rate(t):
        idx = np.clip(np.searchsorted(nodes, t, side="right") - 1, 0, values.size - 1)
        return values[idx]

    return rate


def schedule_from_dict(data: dict) -> NoiseSchedule:
    """Rebuild a schedule from :meth:`NoiseSchedule.to_dict` output.

    Rates become piecewise constant with the stored left-point values, which
    reproduces ``alpha_bar`` exactly.
    """
    grid = TimeGrid(np.asarray(data["t_nodes"], dtype=float))
    beta = piecewise_constant(grid.nodes, data["beta"])
    diffusion = piecewise_constant(grid.nodes, data.get("diffusion", data["beta"]))
    return NoiseSchedule(grid, beta, diffusion, kind=data.get("kind", "ou"))


def ddpm_schedule(beta: RateFn | float, grid: TimeGrid) -> NoiseSchedule:
    """Variance-preserving schedule with D(t) = beta(t)."""
    if not callable(beta):
        beta = constant(beta)
    return NoiseSchedule(grid, beta, beta, kind="ddpm")


def ou_schedule(beta: RateFn | float, diffusion: RateFn | float, grid: TimeGrid) -> NoiseSchedule:
    if not callable(beta):
        beta = constant(beta)
    if not callable(diffusion):
        diffusion = constant(diffusion)
    return NoiseSchedule(grid, beta, diffusion, kind="ou")


def pure_diffusion_schedule(diffusion: RateFn | float, grid: TimeGrid) -> NoiseSchedule:
    if not callable(diffusion):
        diffusion = constant(diffusion)
    return NoiseSchedule(grid, constant(0.0), diffusion, kind="pure_diffusion")
