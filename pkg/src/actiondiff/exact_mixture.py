"""Gaussian mixtures evolved exactly through the forward process.

Mixtures are closed under pure diffusion and OU evolution, so they give
exact P(x, t) and exact scores d/dx ln P(x, t) at every time.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .analytic_kernels import GaussianDensity, ou_moments
from .schedule import NoiseSchedule, TimeGrid
from .sde_sim import ProcessSpec

_LOG_2PI = math.log(2.0 * math.pi)


class MixtureError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray  # (K, d)
    variances: np.ndarray  # (K, d)

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        m = np.asarray(self.means, dtype=float)
        v = np.asarray(self.variances, dtype=float)
        if w.size < 1:
            raise MixtureError("mixture needs at least one component")
        if m.ndim == 1:
            m = m[:, None]
        if v.ndim == 1:
            v = v[:, None]
        m, v = np.broadcast_arrays(m, v)
        if m.shape[0] != w.size:
            raise MixtureError("weights and components disagree in number")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise MixtureError("weights must be non-negative and sum to 1")
        if np.any(v <= 0):
            raise MixtureError("component variances must be positive")
        object.__setattr__(self, "weights", w.copy())
        object.__setattr__(self, "means", m.copy())
        object.__setattr__(self, "variances", v.copy())

    @classmethod
    def from_components(cls, weights, components: Sequence[GaussianDensity]) -> "GaussianMixture":
        return cls(weights, np.stack([c.mean for c in components]), np.stack([c.variance for c in components]))

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianMixture":
        return cls(data["weights"], data["means"], data["variances"])

    @classmethod
    def from_json(cls, path) -> "GaussianMixture":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        squeeze = self.dim == 1
        return {
            "weights": self.weights.tolist(),
            "means": (self.means[:, 0] if squeeze else self.means).tolist(),
            "variances": (self.variances[:, 0] if squeeze else self.variances).tolist(),
        }

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def components(self) -> list[GaussianDensity]:
        return [GaussianDensity(m, v) for m, v in zip(self.means, self.variances)]

    def _points(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.dim == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            x = x[..., None]
        return x

    def _component_logpdf(self, x) -> np.ndarray:
        x = self._points(x)[..., None, :]
        z = (x - self.means) ** 2 / self.variances
        return -0.5 * np.sum(z + np.log(self.variances) + _LOG_2PI, axis=-1)

    def logpdf(self, x) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return logsumexp(self._component_logpdf(x) + np.log(self.weights), axis=-1)

    def pdf(self, x) -> np.ndarray:
        return np.exp(self.logpdf(x))

    def responsibilities(self, x) -> np.ndarray:
        with np.errstate(divide="ignore"):
            lj = self._component_logpdf(x) + np.log(self.weights)
        return np.exp(lj - logsumexp(lj, axis=-1, keepdims=True))

    def score(self, x) -> np.ndarray:
        """d/dx ln P at points of shape (..., d)."""
        xp = self._points(x)
        r = self.responsibilities(xp)
        comp = -(xp[..., None, :] - self.means) / self.variances
        return np.sum(r[..., None] * comp, axis=-2)

    def score_derivative(self, x) -> np.ndarray:
        """d^2/dx^2 ln P for one-dimensional mixtures."""
        if self.dim != 1:
            raise MixtureError("second derivative only provided in 1-D")
        xp = self._points(x)
        r = self.responsibilities(xp)
        comp = (-(xp[..., None, :] - self.means) / self.variances)[..., 0]
        inv = (1.0 / self.variances)[:, 0]
        s = np.sum(r * comp, axis=-1)
        # d/dx ln P = sum r_k c_k ; d/dx r_k = r_k (c_k - s)
        return np.sum(r * (comp - s[..., None]) * comp, axis=-1) - np.sum(r * inv, axis=-1)

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def variance(self) -> np.ndarray:
        mu = self.mean()
        return self.weights @ (self.variances + self.means**2) - mu**2

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        k = rng.choice(self.weights.size, size=n, p=self.weights)
        return self.means[k] + np.sqrt(self.variances[k]) * rng.standard_normal((n, self.dim))

    def cdf(self, x) -> np.ndarray:
        """Cumulative distribution in 1-D."""
        from scipy.special import ndtr

        if self.dim != 1:
            raise MixtureError("cdf only defined in 1-D")
        x = np.asarray(x, dtype=float)[..., None]
        z = (x - self.means[:, 0]) / np.sqrt(self.variances[:, 0])
        return ndtr(z) @ self.weights


def evolve_to(mixture: GaussianMixture, schedule: NoiseSchedule, t0: float, t: float, kind: str) -> GaussianMixture:
    """Evolve ``mixture`` given at t0 to time t under the schedule's forward process."""
    if t == t0:
        return mixture
    if kind == "ou":
        factor, kvar = ou_moments(t0, t, schedule)
        return GaussianMixture(mixture.weights, factor * mixture.means, factor**2 * mixture.variances + kvar)
    if kind == "pure_diffusion":
        added = schedule.integrated_diffusion(t0, t)
        return GaussianMixture(mixture.weights, mixture.means, mixture.variances + added)
    if kind == "ddpm":
        # discrete variance-preserving kernel between grid nodes
        ratio = schedule.alpha_bar_at(t) / schedule.alpha_bar_at(t0)
        return GaussianMixture(mixture.weights, np.sqrt(ratio) * mixture.means, ratio * mixture.variances + 1.0 - ratio)
    raise MixtureError(f"unknown process kind {kind!r}")


@dataclass(frozen=True)
class MixturePath:
    """Exact mixture snapshots on a time grid (forward time)."""

    grid: TimeGrid
    snapshots: tuple
    schedule: NoiseSchedule
    kind: str

    def at(self, t: float) -> GaussianMixture:
        """Snapshot at an arbitrary forward time t >= t_0."""
        return evolve_to(self.snapshots[0], self.schedule, self.grid.t_start, t, self.kind)

    def logpdf(self, x, s: int) -> np.ndarray:
        return self.snapshots[s].logpdf(x)

    def pdf(self, x, s: int) -> np.ndarray:
        return self.snapshots[s].pdf(x)


def evolve_mixture(mixture: GaussianMixture, schedule: NoiseSchedule, grid: TimeGrid, kind: str = "ou") -> MixturePath:
    """Closed-form forward evolution of every component onto the nodes of ``grid``."""
    if kind not in ("ou", "pure_diffusion", "ddpm"):
        raise MixtureError(f"unknown process kind {kind!r}")
    t0 = grid.t_start
    snaps = tuple(evolve_to(mixture, schedule, t0, float(t), kind) for t in grid.nodes)
    return MixturePath(grid, snaps, schedule, kind)


def exact_score(path: MixturePath, x, s: int) -> np.ndarray:
    if not 0 <= s <= path.grid.n:
        raise MixtureError(f"node index {s} outside grid")
    return path.snapshots[s].score(x)


def reverse_drift(spec_forward: ProcessSpec, path: MixturePath, x, s: int) -> np.ndarray:
    """F_rev = -F(x, t_s) + D(t_s) d/dx ln P(x, t_s)."""
    t = float(path.grid.nodes[s])
    xp = path.snapshots[s]._points(x)
    return -np.asarray(spec_forward.drift(xp, t)) + spec_forward.D(t) * exact_score(path, xp, s)


def equilibrium_score_check(
    F: Callable[[np.ndarray], np.ndarray],
    D: float,
    x_grid: np.ndarray,
    potential: Callable[[np.ndarray], np.ndarray],
    mass_tol: float = 1e-8,
) -> float:
    """Max |d ln P_eq/dx - 2 F / D| with P_eq proportional to exp(-2 V / D) on ``x_grid``.

    The log-density derivative is taken by complex-step differentiation, so
    ``potential`` must accept complex arguments; the check is exact up to
    rounding whenever F = -V'.
    """
    x = np.asarray(x_grid, dtype=float)
    log_p = -2.0 * potential(x) / D
    log_p = log_p - np.max(log_p)
    if max(log_p[0], log_p[-1]) > math.log(mass_tol):
        raise MixtureError("equilibrium density does not decay on the grid; not normalizable there")
    h = 1e-20
    dlogp = np.imag(-2.0 * potential(x + 1j * h) / D) / h
    return float(np.max(np.abs(dlogp - 2.0 * np.asarray(F(x)) / D)))
