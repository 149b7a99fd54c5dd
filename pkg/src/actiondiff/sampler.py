"""Generation by the reverse SDE with an exact or learned score.

The reverse process runs on the forward grid read backwards. The step from
forward node t_k to t_{k-1} is a left-point Euler-Maruyama step in reverse
time, so drift and noise use the forward quantities at t_k:

    x <- x + [-F(x, t_k) + D(t_k) S(x, t_k)] (t_k - t_{k-1}) + sqrt(D(t_k)) dW.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .exact_mixture import MixturePath
from .schedule import NoiseSchedule, TimeGrid
from .sde_sim import DEFAULT_BOUND, ProcessSpec, _init_states, _step_increments

ScoreFn = Callable[[np.ndarray, float], np.ndarray]


class SamplingError(RuntimeError):
    pass


def reverse_process_spec(spec_forward: ProcessSpec, score: ScoreFn, t_start: float, t_end: float) -> ProcessSpec:
    """Reverse SDE in reverse-time labeling r = t_start + t_end - t.

    Useful for path-space comparisons; :func:`sample_reverse` steps on the
    forward nodes directly to avoid round-off in the time mapping.
    """
    total = t_start + t_end

    def drift(x, r):
        t = total - r
        return -np.asarray(spec_forward.drift(x, t)) + spec_forward.D(t) * np.asarray(score(x, t)).reshape(x.shape)

    return ProcessSpec(drift, lambda r: spec_forward.D(total - r), spec_forward.dimension)


def tractable_initial(schedule: NoiseSchedule, var0: float | None = None, mean0: float = 0.0, path: MixturePath | None = None):
    """Sampler for the reverse start at the last node.

    OU and DDPM schedules use the stationary Gaussian N(0, D / beta) (N(0, 1)
    for DDPM). Pure diffusion needs either the exact evolved mixture
    ``path`` or the data variance ``var0``: N(mean0, var0 + integral of D).
    """
    t0, t1 = schedule.grid.t_start, schedule.grid.t_end
    if path is not None:
        final = path.at(t1)
        return lambda n, rng: final.sample(n, rng)
    if schedule.kind in ("ou", "ddpm"):
        beta = float(schedule.beta_at(t1))
        if beta <= 0:
            raise SamplingError("stationary start needs beta > 0 at the final time")
        var = float(schedule.diffusion_at(t1)) / beta
        return lambda n, rng: math.sqrt(var) * rng.standard_normal((n, 1))
    if var0 is None:
        raise SamplingError("pure diffusion start needs var0 or an exact path")
    var = var0 + schedule.integrated_diffusion(t0, t1)
    return lambda n, rng: mean0 + math.sqrt(var) * rng.standard_normal((n, 1))


@dataclass
class GenerationRun:
    samples: np.ndarray  # (n_samples, d) at forward time t_stop
    t_stop: float
    seed: int
    grid: TimeGrid
    source: str = "model"
    snapshots: dict = field(default_factory=dict)  # forward node index -> states

    def write_csv(self, path) -> None:
        _write_states(path, self.samples)

    def write_snapshots(self, prefix) -> list:
        paths = []
        for k, states in sorted(self.snapshots.items()):
            p = f"{prefix}_node{k:05d}.csv"
            _write_states(p, states)
            paths.append(p)
        return paths

    def summary(self) -> dict:
        return {
            "n_samples": int(self.samples.shape[0]),
            "t_stop": self.t_stop,
            "seed": self.seed,
            "source": self.source,
            "mean": self.samples.mean(axis=0).tolist(),
            "variance": self.samples.var(axis=0).tolist(),
        }

    def write_summary(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=1)


def _write_states(path, states: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x_{j}" for j in range(states.shape[1])])
        for row in states:
            w.writerow([repr(float(v)) for v in row])


def _stop_index(nodes: np.ndarray, t_min: float) -> int:
    """Last forward node reached: steps out of node k are taken only while t_k > t_min."""
    above = np.nonzero(nodes > t_min)[0]
    if above.size == 0:
        return nodes.size - 1
    return int(above[0]) - 1 if above[0] > 0 else 0


def sample_reverse(
    score: ScoreFn,
    spec_forward: ProcessSpec,
    schedule: NoiseSchedule,
    grid: TimeGrid,
    n_samples: int,
    seed: int,
    *,
    init=None,
    t_min: float | None = None,
    snapshot_nodes=(),
    n_workers: int = 1,
    bound: float = DEFAULT_BOUND,
    source: str = "model",
) -> GenerationRun:
    """Integrate the reverse SDE from the last node of ``grid`` down toward t_start.

    ``t_min`` (default 1e-3 of the grid span above t_start) keeps the score
    away from zero noise: the run stops at the last node whose outgoing step
    would need the score at a time <= t_min. ``snapshot_nodes`` lists
    forward node indices whose states are kept.
    """
    if n_samples < 1:
        raise SamplingError("n_samples must be at least 1")
    nodes = grid.nodes
    if t_min is None:
        t_min = grid.t_start + 1e-3 * (grid.t_end - grid.t_start)
    stop = _stop_index(nodes, t_min)
    d = spec_forward.dimension
    x0 = _init_states(init if init is not None else tractable_initial(schedule), n_samples, d, seed)
    if x0.shape[1] != d:
        raise SamplingError(f"initial states have dimension {x0.shape[1]}, expected {d}")
    wanted = set(int(k) for k in snapshot_nodes)
    n = grid.n

    def run(lo, hi):
        x = x0[lo:hi].copy()
        ids = np.arange(lo, hi, dtype=np.uint64)
        kept = {n: x.copy()} if n in wanted else {}
        for j, k in enumerate(range(n, stop, -1)):
            t, dt = float(nodes[k]), float(nodes[k] - nodes[k - 1])
            D = spec_forward.D(t)
            s = np.asarray(score(x, t), dtype=float).reshape(x.shape)
            drift = -np.asarray(spec_forward.drift(x, t), dtype=float) + D * s
            if not np.all(np.isfinite(drift)):
                raise SamplingError(f"non-finite reverse drift at t={t!r}")
            x = x + drift * dt + math.sqrt(D) * _step_increments(seed, j, ids, d, dt)
            if np.any(np.abs(x) > bound) or not np.all(np.isfinite(x)):
                raise SamplingError(f"state exceeded bound {bound:g} at t={float(nodes[k - 1])!r}")
            if k - 1 in wanted:
                kept[k - 1] = x.copy()
        return x, kept

    chunk = -(-n_samples // max(1, n_workers))
    bounds = [(lo, min(lo + chunk, n_samples)) for lo in range(0, n_samples, chunk)]
    if n_workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            parts = list(pool.map(lambda b: run(*b), bounds))
    else:
        parts = [run(*b) for b in bounds]
    samples = np.concatenate([p[0] for p in parts])
    snaps = {k: np.concatenate([p[1][k] for p in parts]) for k in parts[0][1]}
    return GenerationRun(samples, float(nodes[stop]), seed, grid, source, snaps)


def exact_score_fn(path: MixturePath) -> ScoreFn:
    """Score callable backed by exact mixture snapshots (any forward time)."""

    def score(x, t):
        return path.at(float(t)).score(x)

    return score
