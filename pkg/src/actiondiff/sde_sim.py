"""Euler-Maruyama ensembles, killed diffusion and Feynman-Kac estimates.

States are arrays of shape ``(n_paths, d)``. Drifts take ``(x, t)`` with
``x`` of that shape and return the same shape; killing rates return
``(n_paths,)``. Gaussian increments come from a counter-based generator
keyed on ``(seed, path, step, coordinate)``, so a block of paths simulated
on its own reproduces the same numbers as inside a larger run.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .schedule import NoiseSchedule, TimeGrid

DriftFn = Callable[[np.ndarray, float], np.ndarray]
KillFn = Callable[[np.ndarray, float], np.ndarray]

DEFAULT_BOUND = 1e6

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_C1 = np.uint64(0xBF58476D1CE4E5B9)
_C2 = np.uint64(0x94D049BB133111EB)


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ProcessSpec:
    """dx = F(x, t) dt + sqrt(D(t)) dW, optionally killed at rate V(x, t)."""

    drift: DriftFn
    diffusion: Callable[[float], float]
    dimension: int = 1
    killing: KillFn | None = None

    def D(self, t: float) -> float:
        return float(np.asarray(self.diffusion(t)))


def ou_process(schedule: NoiseSchedule, dimension: int = 1) -> ProcessSpec:
    """Ornstein-Uhlenbeck forward process dx = -beta(t) x / 2 dt + sqrt(D(t)) dW."""

    def drift(x, t):
        return -0.5 * float(schedule.beta_at(t)) * x

    return ProcessSpec(drift, lambda t: float(schedule.diffusion_at(t)), dimension)


def pure_diffusion_process(diffusion: float | Callable[[float], float], dimension: int = 1) -> ProcessSpec:
    D = diffusion if callable(diffusion) else (lambda t, _d=float(diffusion): _d)
    return ProcessSpec(lambda x, t: np.zeros_like(x), D, dimension)


# -- counter-based normals ---------------------------------------------------


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _C1
    z = (z ^ (z >> np.uint64(27))) * _C2
    return z ^ (z >> np.uint64(31))


def counter_normals(seed: int, path: np.ndarray, step: np.ndarray | int, coord: np.ndarray | int) -> np.ndarray:
    """Standard normals indexed by (seed, path, step, coord), broadcast over the index arrays."""
    with np.errstate(over="ignore"):
        key = _mix(np.uint64(seed % 2**64) + _GOLDEN)
        p = np.asarray(path, dtype=np.uint64)
        s = np.asarray(step, dtype=np.uint64)
        c = np.asarray(coord, dtype=np.uint64)
        h = _mix(key + _GOLDEN * (p + np.uint64(1)))
        h = _mix(h + _GOLDEN * (s + np.uint64(1)))
        h = _mix(h + _GOLDEN * (c + np.uint64(1)))
        a = _mix(h + _GOLDEN)
        b = _mix(h + _GOLDEN * np.uint64(2))
    u1 = ((a >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    u2 = (b >> np.uint64(11)).astype(np.float64) * 2.0**-53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def _step_increments(seed: int, step: int, path_ids: np.ndarray, d: int, dt: float) -> np.ndarray:
    z = counter_normals(seed, path_ids[:, None], step, np.arange(d)[None, :])
    return math.sqrt(dt) * z


def wiener_increments(grid: TimeGrid, n_paths: int, d: int, seed: int, path_offset: int = 0) -> np.ndarray:
    """Increments dW_s ~ N(0, dt_s), shape ``(n_steps, n_paths, d)``."""
    if n_paths < 1:
        raise SimulationError("n_paths must be at least 1")
    path_ids = np.arange(path_offset, path_offset + n_paths, dtype=np.uint64)
    out = np.empty((grid.n, n_paths, d))
    for s, dt in enumerate(grid.steps):
        out[s] = _step_increments(seed, s, path_ids, d, dt)
    return out


# -- stepping ----------------------------------------------------------------


def euler_maruyama_step(x: np.ndarray, s: int, spec: ProcessSpec, grid: TimeGrid, dW: np.ndarray) -> np.ndarray:
    """One left-point step x + F(x, t_s) dt_s + sqrt(D(t_s)) dW."""
    if not 0 <= s < grid.n:
        raise SimulationError(f"step index {s} outside grid with {grid.n} steps")
    t = float(grid.nodes[s])
    dt = float(grid.nodes[s + 1] - t)
    f = np.asarray(spec.drift(x, t), dtype=float)
    if not np.all(np.isfinite(f)):
        bad = np.unravel_index(np.argmax(~np.isfinite(f)), f.shape)[0]
        raise SimulationError(f"non-finite drift at x={x[bad]!r}, t={t!r}")
    return x + f * dt + math.sqrt(spec.D(t)) * dW


@dataclass
class Ensemble:
    """Retained states ``(n_retained, n_paths, d)`` with Feynman-Kac weights per retained node."""

    states: np.ndarray
    weights: np.ndarray
    grid: TimeGrid
    retained: np.ndarray
    seed: int

    @property
    def times(self) -> np.ndarray:
        return self.grid.nodes[self.retained]

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]

    @property
    def terminal_weights(self) -> np.ndarray:
        return self.weights[-1]


def _init_states(init, n_paths: int, d: int, seed: int) -> np.ndarray:
    if callable(init):
        rng = np.random.default_rng(np.random.SeedSequence([seed % 2**63, 0x1A17]))
        x0 = np.asarray(init(n_paths, rng), dtype=float)
        if x0.ndim == 1 and d == 1:
            x0 = x0[:, None]
    else:
        x0 = np.asarray(init, dtype=float)
        if x0.ndim <= 1:
            x0 = x0.reshape(1, -1)
    if x0.ndim != 2:
        raise SimulationError("initial states must be (n_paths, d)")
    return np.array(np.broadcast_to(x0, (n_paths, x0.shape[1])), dtype=float)


def _simulate_block(spec, x, path_ids, grid, seed, step_offset, retain_mask, bound):
    d = spec.dimension
    logw = np.zeros(x.shape[0])
    kept_x, kept_w = [], []
    if retain_mask[0]:
        kept_x.append(x.copy())
        kept_w.append(np.exp(logw))
    for s in range(grid.n):
        t = float(grid.nodes[s])
        dt = float(grid.nodes[s + 1] - t)
        if spec.killing is not None:
            logw -= np.asarray(spec.killing(x, t), dtype=float).reshape(-1) * dt
        dW = _step_increments(seed, step_offset + s, path_ids, d, dt)
        x = euler_maruyama_step(x, s, spec, grid, dW)
        if np.any(np.abs(x) > bound):
            raise SimulationError(f"state exceeded bound {bound:g} at t={grid.nodes[s + 1]!r}")
        if retain_mask[s + 1]:
            kept_x.append(x.copy())
            kept_w.append(np.exp(logw))
    return np.stack(kept_x), np.stack(kept_w)


def simulate_ensemble(
    spec: ProcessSpec,
    init,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    retain: Sequence[int] | None = None,
    *,
    n_workers: int = 1,
    chunk_size: int | None = None,
    bound: float = DEFAULT_BOUND,
    step_offset: int = 0,
    path_offset: int = 0,
) -> Ensemble:
    """Forward Euler-Maruyama sweep over ``grid``.

    ``init`` is an array broadcastable to ``(n_paths, d)`` or a callable
    ``init(n, rng)``. ``retain`` lists node indices to keep (default: first
    and last). With a killing rate each path carries the weight
    exp(-sum_s V(x_s, t_s) dt_s); paths are never removed.
    ``step_offset`` shifts the increment counter so a run started mid-way
    through a longer grid draws the same noise as the long run.
    """
    if n_paths < 1:
        raise SimulationError("n_paths must be at least 1")
    d = spec.dimension
    retained = np.array(sorted(set([0, grid.n] if retain is None else retain)), dtype=int)
    if retained.min() < 0 or retained.max() > grid.n:
        raise SimulationError("retained node index out of range")
    mask = np.zeros(grid.n + 1, dtype=bool)
    mask[retained] = True
    x0 = _init_states(init, n_paths, d, seed)
    if x0.shape[1] != d:
        raise SimulationError(f"initial states have dimension {x0.shape[1]}, expected {d}")

    chunk = chunk_size or max(1, -(-n_paths // max(1, n_workers)))
    starts = list(range(0, n_paths, chunk))

    def run(start):
        stop = min(start + chunk, n_paths)
        ids = np.arange(path_offset + start, path_offset + stop, dtype=np.uint64)
        return _simulate_block(spec, x0[start:stop], ids, grid, seed, step_offset, mask, bound)

    if n_workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    states = np.concatenate([p[0] for p in parts], axis=1)
    weights = np.concatenate([p[1] for p in parts], axis=1)
    return Ensemble(states, weights, grid, retained, seed)


def feynman_kac_expectation(
    spec: ProcessSpec,
    terminal_fn: Callable[[np.ndarray], np.ndarray],
    start: tuple,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    **kwargs,
) -> tuple[float, float]:
    """Estimate E[J1(x(t_n)) exp(-int V dt) | x(tau) = xi] and its standard error.

    ``start = (xi, tau)`` with ``tau`` a node of ``grid``.
    """
    if n_paths < 1:
        raise SimulationError("need at least one path")
    xi, tau = start
    i0 = grid.index_of(tau)
    if i0 >= grid.n:
        raise SimulationError("start time must precede the final node")
    sub = grid.slice(i0, grid.n)
    ens = simulate_ensemble(spec, np.atleast_1d(np.asarray(xi, dtype=float)), sub, n_paths, seed, **kwargs)
    vals = np.asarray(terminal_fn(ens.terminal), dtype=float).reshape(-1) * ens.terminal_weights
    if n_paths == 1:
        return float(vals[0]), float("nan")
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n_paths))


def write_ensemble_csv(ensemble: Ensemble, path) -> None:
    """One row per path per retained node: path_id, t, x_0..x_{d-1}, weight."""
    d = ensemble.states.shape[2]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path_id", "t"] + [f"x_{k}" for k in range(d)] + ["weight"])
        for j, t in enumerate(ensemble.times):
            for p in range(ensemble.states.shape[1]):
                w.writerow([p, repr(float(t))] + [repr(float(v)) for v in ensemble.states[j, p]] + [repr(float(ensemble.weights[j, p]))])
