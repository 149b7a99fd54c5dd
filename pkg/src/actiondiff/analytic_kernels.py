"""Closed-form Gaussian transition kernels used as oracles."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .schedule import NoiseSchedule

_LOG_2PI = math.log(2.0 * math.pi)


class KernelError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianDensity:
    """Diagonal Gaussian N(mean, diag(variance))."""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        var = np.atleast_1d(np.asarray(self.variance, dtype=float))
        mean, var = np.broadcast_arrays(mean, var)
        if not np.all(var > 0):
            raise KernelError("variances must be positive")
        object.__setattr__(self, "mean", mean.copy())
        object.__setattr__(self, "variance", var.copy())

    @property
    def dim(self) -> int:
        return self.mean.size

    def _as_points(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.dim == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            x = x[..., None]
        return x

    def logpdf(self, x) -> np.ndarray:
        """Log density at points ``x`` of shape (..., d); 1-D inputs may drop the last axis."""
        x = self._as_points(x)
        z = (x - self.mean) ** 2 / self.variance
        return -0.5 * np.sum(z + np.log(self.variance) + _LOG_2PI, axis=-1)

    def pdf(self, x) -> np.ndarray:
        return np.exp(self.logpdf(x))

    def score(self, x) -> np.ndarray:
        return -(self._as_points(x) - self.mean) / self.variance

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + np.sqrt(self.variance) * rng.standard_normal((n, self.dim))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "variance": self.variance.tolist()}


def convolve(a: GaussianDensity, b: GaussianDensity) -> GaussianDensity:
    """Density of the sum of independent draws from ``a`` and ``b``."""
    if a.dim != b.dim:
        raise KernelError(f"dimension mismatch: {a.dim} vs {b.dim}")
    return GaussianDensity(a.mean + b.mean, a.variance + b.variance)


def pure_diffusion_kernel(x0, t0: float, t: float, D: float) -> GaussianDensity:
    """Transition density of dx = sqrt(D) dW from (x0, t0) to time t."""
    if not t > t0:
        raise KernelError("need t > t0")
    if D <= 0:
        raise KernelError("diffusion coefficient must be positive")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    return GaussianDensity(x0, np.full_like(x0, D * (t - t0)))


def ou_moments(t0: float, t: float, schedule: NoiseSchedule) -> tuple[float, float]:
    """Mean factor exp(-int beta / 2) and kernel variance (D/beta)(t) (1 - exp(-int beta))."""
    if not t > t0:
        raise KernelError("need t > t0")
    ib = schedule.integrated_beta(t0, t)
    beta_t = float(schedule.beta_at(t))
    if ib <= 0.0 or beta_t <= 0.0:
        raise KernelError("beta vanishes on the interval; use pure_diffusion_kernel")
    ratio = float(schedule.diffusion_at(t)) / beta_t
    return math.exp(-0.5 * ib), ratio * -math.expm1(-ib)


def ou_kernel(x0, t0: float, t: float, schedule: NoiseSchedule) -> GaussianDensity:
    """Ornstein-Uhlenbeck transition density for dx = -beta x / 2 dt + sqrt(D) dW."""
    factor, var = ou_moments(t0, t, schedule)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    return GaussianDensity(factor * x0, np.full_like(x0, var))


def ddpm_finite_kernel(x_d, t: float, schedule: NoiseSchedule) -> GaussianDensity:
    """N(sqrt(abar_t) x_d, (1 - abar_t)) with abar from the discrete product at node t."""
    abar = schedule.alpha_bar_at(t)
    if abar >= 1.0:
        raise KernelError("alpha_bar = 1: zero-noise kernel is a point mass")
    x_d = np.atleast_1d(np.asarray(x_d, dtype=float))
    return GaussianDensity(math.sqrt(abar) * x_d, np.full_like(x_d, 1.0 - abar))


def ddpm_step_composition(schedule: NoiseSchedule, s_end: int | None = None) -> tuple[float, float]:
    """Mean factor and variance after composing the Euler-Maruyama OU steps 0..s_end-1.

    Each step maps x -> (1 - beta_s / 2) x + sqrt(beta_s) eps, i.e. the small
    time transition of dx = -beta x / 2 dt + sqrt(beta) dW without the
    sqrt(1 - beta_s) rewriting.
    """
    b = schedule.beta_steps[: schedule.grid.n if s_end is None else s_end]
    factor, var = 1.0, 0.0
    for bs in b:
        m = 1.0 - 0.5 * bs
        factor *= m
        var = m * m * var + bs
    return factor, var


TransitionFn = Callable[[np.ndarray, float, float], GaussianDensity]


def chapman_kolmogorov_residual(
    kernel: TransitionFn, t0: float, tau: float, t: float, x_grid: np.ndarray, x0: float = 0.0
) -> float:
    """Worst gap between int K(x,t|xi,tau) K(xi,tau|x0,t0) dxi and K(x,t|x0,t0) on ``x_grid``.

    ``kernel(x_start, s, t)`` returns the 1-D transition density from
    ``x_start`` (array) at time s. The xi integral is a trapezoid rule on
    ``x_grid``.
    """
    if not (t0 <= tau <= t) or t0 >= t:
        raise KernelError("need t0 <= tau <= t with t0 < t")
    x = np.asarray(x_grid, dtype=float)
    direct = kernel(np.array([x0]), t0, t).pdf(x)
    if tau == t0 or tau == t:
        return float(np.max(np.abs(direct - direct)))
    first = kernel(np.array([x0]), t0, tau).pdf(x)
    mass = np.trapezoid(first, x)
    if mass < 1.0 - 1e-6:
        raise KernelError(f"quadrature grid captures only {mass:.8f} of the intermediate kernel")
    second = kernel(x, tau, t)  # one Gaussian per source node xi
    dens = np.exp(
        -0.5 * (x[:, None] - second.mean[None, :]) ** 2 / second.variance[None, :]
        - 0.5 * np.log(2 * np.pi * second.variance[None, :])
    )
    composed = np.trapezoid(dens * first[None, :], x, axis=1)
    return float(np.max(np.abs(composed - direct)))
