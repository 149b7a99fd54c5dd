"""Relative entropy on cells and on paths.

Transition matrices are indexed ``[source l, target k]`` and rows sum to 1.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import brentq
from scipy.stats import binom

from .exact_mixture import MixturePath
from .pde_grid import Field
from .schedule import TimeGrid
from .sde_sim import ProcessSpec, _init_states, _step_increments

STIRLING_FACTOR = 100


class DivergenceError(ValueError):
    pass


def _xlogy_ratio(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """p ln(p/q) with 0 ln 0 = 0 and +inf where p > 0 = q."""
    out = np.zeros(np.broadcast(p, q).shape)
    p, q = np.broadcast_arrays(p, q)
    pos = p > 0
    bad = pos & (q <= 0)
    ok = pos & ~bad
    out[ok] = p[ok] * np.log(p[ok] / q[ok])
    out[bad] = np.inf
    return out


def _check_stochastic(m: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DivergenceError(f"{name} must be a square matrix")
    if np.any(m < 0) or np.max(np.abs(m.sum(axis=1) - 1.0)) > 1e-12:
        raise DivergenceError(f"{name} rows must be probability vectors")
    return m


def discrete_kl(p_i, h, g) -> float:
    """sum_{l,k} p_i(l) h(k|l) ln(h(k|l)/g(k|l)); ``math.inf`` on support violation."""
    p = np.asarray(p_i, dtype=float)
    h = _check_stochastic(h, "h")
    g = _check_stochastic(g, "g")
    if p.shape != (h.shape[0],) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
        raise DivergenceError("p_i must be a probability vector over source cells")
    terms = p[:, None] * _xlogy_ratio(h, g)
    terms[p == 0] = 0.0
    total = float(terms.sum())
    return math.inf if math.isinf(total) else max(total, 0.0)


@dataclass(frozen=True)
class CellSystem:
    """Occupancies a (start) and b (end) over cells with inherent transitions g[l, k]."""

    a: np.ndarray
    b: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        b = np.asarray(self.b, dtype=float)
        g = _check_stochastic(self.g, "g")
        if a.shape != b.shape or a.shape != (g.shape[0],):
            raise DivergenceError("a, b and g disagree in cell count")
        if np.any(a < 0) or np.any(b < 0):
            raise DivergenceError("occupancies must be non-negative")
        if abs(a.sum() - b.sum()) > 1e-9 * max(1.0, a.sum()):
            raise DivergenceError("a and b must hold the same number of particles")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "g", g)

    @property
    def N(self) -> float:
        return float(self.a.sum())

    @property
    def cells(self) -> int:
        return self.a.size

    @classmethod
    def from_dict(cls, data: dict) -> "CellSystem":
        return cls(data["a"], data["b"], data["g"])

    @classmethod
    def from_json(cls, path) -> "CellSystem":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {"a": self.a.tolist(), "b": self.b.tolist(), "g": self.g.tolist()}


@dataclass
class TransferResult:
    h_star: np.ndarray
    kl_star: float
    log_prob_rate: float
    iterations: int
    marginal_residual: float
    converged: bool
    residual_history: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.h_star, self.kl_star, self.log_prob_rate))

    def report(self) -> dict:
        return {
            "kl_star": self.kl_star,
            "rate": self.log_prob_rate,
            "iterations": self.iterations,
            "marginal_residual": self.marginal_residual,
            "converged": self.converged,
        }

    def write(self, csv_path, json_path) -> None:
        with open(csv_path, "w") as fh:
            for row in self.h_star:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
        with open(json_path, "w") as fh:
            json.dump(self.report(), fh, indent=2)


def optimal_transfer(system: CellSystem, tol: float = 1e-13, max_iter: int = 100_000) -> TransferResult:
    """Minimize discrete_kl(a/N, h, g) subject to sum_l a_l h(k|l) = b_k.

    The minimizer is diag(a) g scaled by alternating row and column factors
    (Sinkhorn). Source cells with a_l = 0 keep h(.|l) = g(.|l).
    """
    if np.any(system.g <= 0):
        raise DivergenceError("g must be strictly positive")
    N = system.N
    p = system.a / N
    q = system.b / N
    rows = p > 0
    K = p[rows, None] * system.g[rows]
    u = np.ones(K.shape[0])
    v = np.ones(K.shape[1])
    history = []
    converged = False
    it = 0
    resid = math.inf
    for it in range(1, max_iter + 1):
        v = q / (K.T @ u)
        u = p[rows] / (K @ v)
        pi = u[:, None] * K * v[None, :]
        resid = float(np.abs(pi.sum(axis=0) - q).sum() + np.abs(pi.sum(axis=1) - p[rows]).sum())
        history.append(resid)
        if resid < tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"Sinkhorn stopped after {max_iter} iterations with marginal residual {resid:.3g}", RuntimeWarning)
    h = system.g.copy()
    h[rows] = pi / p[rows, None]
    h[rows] /= h[rows].sum(axis=1, keepdims=True)
    kl = discrete_kl(p, h, system.g)
    if N < STIRLING_FACTOR * system.cells:
        warnings.warn(f"N={N:g} is small against {system.cells} cells; the rate -N*KL is only asymptotic", RuntimeWarning)
    return TransferResult(h, kl, -N * kl, it, resid, converged, history)


# -- ink-drop large deviation experiment ---------------------------------------------


def tilted_outcome(a, g, threshold: float) -> tuple[np.ndarray, float]:
    """Most likely final occupancy with b_0 >= threshold (fraction), and its rate.

    The rate is the Legendre transform of the log moment generating function
    of the cell-0 count, sup_theta [theta * threshold - sum_l p_l ln(1 - g_l0 + g_l0 e^theta)].
    """
    a = np.asarray(a, dtype=float)
    g = np.asarray(g, dtype=float)
    p = a / a.sum()
    mean0 = float(p @ g[:, 0])
    if threshold <= mean0:
        return a.sum() * (p @ g), 0.0

    def tilted(theta):
        w = g.copy()
        w[:, 0] *= math.exp(theta)
        return w / w.sum(axis=1, keepdims=True)

    theta = brentq(lambda th: float(p @ tilted(th)[:, 0]) - threshold, 0.0, 50.0, xtol=1e-15)
    lam = float(p @ np.log(1.0 - g[:, 0] + g[:, 0] * math.exp(theta)))
    b_star = a.sum() * (p @ tilted(theta))
    return b_star, theta * threshold - lam


def exact_tail_probability(a, g, count: int) -> float:
    """P(cell-0 count >= ``count``) when each cell l sends a_l particles independently through g."""
    pmf = np.array([1.0])
    for al, gl in zip(np.asarray(a, dtype=int), np.asarray(g, dtype=float)[:, 0]):
        pmf = np.convolve(pmf, binom.pmf(np.arange(al + 1), al, gl))
    return float(pmf[count:].sum())


@dataclass
class InkResult:
    N: int
    trials: int
    threshold: float
    hits: int
    frequency: float
    empirical_rate: float
    kl_star: float
    legendre_rate: float
    exact_probability: float
    relative_gap: float
    b_star: np.ndarray

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["b_star"] = self.b_star.tolist()
        return d


def ink_experiment(a_frac, g, threshold: float, N: int, trials: int, seed: int, batch: int = 100_000) -> InkResult:
    """Push N particles through g ``trials`` times and count final states with b_0 >= threshold * N.

    Compares -ln(frequency)/N with the Sinkhorn KL at the most likely such
    final state.
    """
    g = np.asarray(g, dtype=float)
    a = np.floor(np.asarray(a_frac, dtype=float) * N).astype(np.int64)
    a[0] += N - a.sum()
    count = int(math.ceil(threshold * N - 1e-9))
    b_star, legendre = tilted_outcome(a, g, count / N)
    res = optimal_transfer(CellSystem(a, b_star, g))
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < trials:
        m = min(batch, trials - done)
        b = np.zeros((m, g.shape[1]), dtype=np.int64)
        for al, gl in zip(a, g):
            b += rng.multinomial(al, gl, size=m)
        hits += int(np.count_nonzero(b[:, 0] >= count))
        done += m
    freq = hits / trials
    emp = -math.log(freq) / N if hits else math.inf
    gap = abs(emp - res.kl_star) / res.kl_star if res.kl_star > 0 else math.inf
    return InkResult(N, trials, count / N, hits, freq, emp, res.kl_star, legendre,
                     exact_tail_probability(a, g, count), gap, b_star)


# -- path space ------------------------------------------------------------------------


def _check_same_diffusion(spec_H: ProcessSpec, spec_G: ProcessSpec, times) -> None:
    for t in times:
        if not math.isclose(spec_H.D(float(t)), spec_G.D(float(t)), rel_tol=1e-12, abs_tol=0.0):
            raise DivergenceError(f"diffusion coefficients differ at t={float(t)!r}")


def pathwise_kl_closed(
    spec_H: ProcessSpec,
    spec_G: ProcessSpec,
    density_path: Field | MixturePath,
    grid: TimeGrid,
    x_grid: np.ndarray | None = None,
) -> float:
    """sum_s dt_s int P(x, t_s) [|F_H - F_G|^2 / 2D + V_G] dx on the 1-D spatial grid.

    For a :class:`Field` the spatial grid and trapezoid weights come from the
    field; for a :class:`MixturePath` pass ``x_grid`` (uniform).
    """
    _check_same_diffusion(spec_H, spec_G, grid.nodes[:-1])
    if isinstance(density_path, Field):
        if density_path.time.nodes.shape != grid.nodes.shape or np.any(density_path.time.nodes != grid.nodes):
            raise DivergenceError("density field lives on a different time grid")
        x = density_path.space.x
        w = density_path.space.weights
        dens = lambda s: density_path.values[s]
    else:
        if x_grid is None:
            raise DivergenceError("x_grid is required for a mixture path")
        x = np.asarray(x_grid, dtype=float)
        w = np.full(x.size, x[1] - x[0])
        w[0] = w[-1] = 0.5 * (x[1] - x[0])
        dens = lambda s: density_path.at(float(grid.nodes[s])).pdf(x)
    pts = x[:, None]
    total = 0.0
    for s, dt in enumerate(grid.steps):
        t = float(grid.nodes[s])
        diff = np.asarray(spec_H.drift(pts, t)) - np.asarray(spec_G.drift(pts, t))
        integrand = np.sum(diff**2, axis=-1) / (2.0 * spec_H.D(t))
        if spec_G.killing is not None:
            integrand = integrand + np.asarray(spec_G.killing(pts, t)).reshape(-1)
        total += dt * float(w @ (dens(s) * integrand))
    return total


def pathwise_kl_monte_carlo(
    spec_H: ProcessSpec,
    spec_G: ProcessSpec,
    init,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
) -> tuple[float, float]:
    """Simulate under H and average sum_s ln(H-step density / G-step density).

    The G step density carries the killing factor exp(-V_G dt), so each step
    adds V_G dt to the log ratio.
    """
    if n_paths < 1:
        raise DivergenceError("need at least one path")
    _check_same_diffusion(spec_H, spec_G, grid.nodes[:-1])
    d = spec_H.dimension
    x = _init_states(init, n_paths, d, seed)
    ids = np.arange(n_paths, dtype=np.uint64)
    logr = np.zeros(n_paths)
    for s, dt in enumerate(grid.steps):
        t = float(grid.nodes[s])
        D = spec_H.D(t)
        fh = np.asarray(spec_H.drift(x, t), dtype=float)
        fg = np.asarray(spec_G.drift(x, t), dtype=float)
        x_new = x + fh * dt + math.sqrt(D) * _step_increments(seed, s, ids, d, dt)
        var = D * dt
        lh = -np.sum((x_new - x - fh * dt) ** 2, axis=1) / (2 * var)
        lg = -np.sum((x_new - x - fg * dt) ** 2, axis=1) / (2 * var)
        logr += lh - lg
        if spec_G.killing is not None:
            logr += np.asarray(spec_G.killing(x, t), dtype=float).reshape(-1) * dt
        x = x_new
    if n_paths == 1:
        return float(logr[0]), float("nan")
    return float(logr.mean()), float(logr.std(ddof=1) / math.sqrt(n_paths))


def compose(h1: np.ndarray, h2: np.ndarray) -> np.ndarray:
    """Two-step transition matrix (first h1 then h2)."""
    return np.asarray(h1) @ np.asarray(h2)
