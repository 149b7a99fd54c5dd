"""Schrodinger-system solver on a 1-D grid and the DPM reverse-kernel machinery.

Kernel matrices are indexed ``[target node, source node]`` and hold density
values G(x_target, t_f | x_source, t_i); integrals over either index use
the trapezoid weights of the spatial grid, so a column of an unkilled
kernel integrates to 1 and a vanishing time step gives diag(1 / w).
Potentials are stored as logarithms because kernel entries span hundreds
of orders of magnitude on wide grids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import solve_banded
from scipy.optimize import fsolve
from scipy.special import logsumexp

from .analytic_kernels import GaussianDensity
from .exact_mixture import GaussianMixture
from .pde_grid import Field, SpatialGrid, forward_operator, solve_backward_kolmogorov, solve_fokker_planck
from .schedule import TimeGrid, make_time_grid
from .sde_sim import ProcessSpec

TransitionFn = Callable[[np.ndarray, float, float], GaussianDensity]


class BridgeError(ValueError):
    pass


def _gauss_matrix(x_target: np.ndarray, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    """log N(x_target[i]; mean[j], var[j])."""
    return -0.5 * (x_target[:, None] - mean[None, :]) ** 2 / var[None, :] - 0.5 * np.log(2 * np.pi * var[None, :])


@dataclass(frozen=True)
class KernelMatrix:
    log_values: np.ndarray  # [target, source]
    space: SpatialGrid
    t_i: float
    t_f: float

    @property
    def values(self) -> np.ndarray:
        return np.exp(self.log_values)

    def column_mass(self) -> np.ndarray:
        return self.space.weights @ self.values

    def apply(self, f: np.ndarray) -> np.ndarray:
        """int G(x_t | x_s) f(x_s) dx_s (push a density forward)."""
        return self.values @ (self.space.weights * f)


def _check_resolution(km: KernelMatrix, std: float | None, killed: bool) -> None:
    sp = km.space
    if std is not None and std < 8 * sp.h:
        raise BridgeError(f"kernel width {std:.3g} is below 8 grid spacings ({8 * sp.h:.3g})")
    if killed:
        return
    reach = 6 * std if std is not None else 0.25 * (sp.hi - sp.lo)
    inner = (sp.x > sp.lo + reach) & (sp.x < sp.hi - reach)
    if np.any(inner):
        deficit = np.max(np.abs(1.0 - km.column_mass()[inner]))
        if deficit > 1e-4:
            raise BridgeError(f"kernel columns lose mass {deficit:.3g} > 1e-4; grid does not resolve the kernel")


def discretize_kernel(
    spec_G: ProcessSpec | None,
    space: SpatialGrid,
    t_i: float,
    t_f: float,
    mode: str = "pde",
    analytic: TransitionFn | None = None,
    n_steps: int = 200,
    startup_steps: int = 4,
) -> KernelMatrix:
    """Matrix of G(x_k, t_f | x_j, t_i) on the grid.

    ``mode="analytic"`` evaluates ``analytic(x_sources, t_i, t_f)``, a
    Gaussian per source node (killing must already be folded into it when
    the Gaussian is not normalized, see :func:`killed_reverse_ou_kernel`).
    ``mode="pde"`` propagates a discrete point mass from every node with the
    Crank-Nicolson solver, killing included.
    """
    if not t_f > t_i:
        raise BridgeError("need t_f > t_i")
    if mode == "analytic":
        if analytic is None:
            raise BridgeError("analytic mode needs a transition function")
        g = analytic(space.x, t_i, t_f)
        if isinstance(g, tuple):
            logv, std = g
        else:
            logv = _gauss_matrix(space.x, g.mean, g.variance)
            std = float(np.sqrt(np.min(g.variance)))
        km = KernelMatrix(logv, space, t_i, t_f)
        _check_resolution(km, std, isinstance(g, tuple))
        return km
    if mode != "pde":
        raise BridgeError(f"unknown mode {mode!r}")
    if spec_G is None:
        raise BridgeError("pde mode needs a process")
    time = make_time_grid(t_i, t_f, n_steps)
    vals = propagate_columns(spec_G, space, time, np.diag(1.0 / space.weights), startup_steps)
    with np.errstate(divide="ignore"):
        km = KernelMatrix(np.log(np.maximum(vals, 0.0)), space, t_i, t_f)
    std = math.sqrt(spec_G.D(t_i) * (t_f - t_i))
    _check_resolution(km, std if std >= 8 * space.h else None, spec_G.killing is not None)
    return km


def _matvec(ab: np.ndarray, V: np.ndarray) -> np.ndarray:
    out = ab[1][:, None] * V
    out[:-1] += ab[0, 1:, None] * V[1:]
    out[1:] += ab[2, :-1, None] * V[:-1]
    return out


def propagate_columns(spec: ProcessSpec, space: SpatialGrid, time: TimeGrid, P0: np.ndarray, startup_steps: int = 4) -> np.ndarray:
    """Crank-Nicolson forward solve applied to every column of ``P0`` at once."""
    P = np.array(P0, dtype=float)
    a_prev = forward_operator(spec, space, float(time.nodes[0]))
    for s, dt in enumerate(time.steps):
        a_next = forward_operator(spec, space, float(time.nodes[s + 1]))
        if s < startup_steps:
            a_mid = forward_operator(spec, space, float(time.nodes[s]) + 0.5 * dt)
            P = solve_banded((1, 1), _eye_minus(a_mid, 0.5 * dt), P)
            P = solve_banded((1, 1), _eye_minus(a_next, 0.5 * dt), P)
        else:
            rhs = P + 0.5 * dt * _matvec(a_prev, P)
            P = solve_banded((1, 1), _eye_minus(a_next, 0.5 * dt), rhs)
        a_prev = a_next
    return P


def _eye_minus(ab: np.ndarray, c: float) -> np.ndarray:
    out = -c * ab
    out[1] += 1.0
    return out


def killed_reverse_ou_kernel(forward_kernel: TransitionFn, t_i: float, t_f: float):
    """Reference kernel for reversing a linear forward process.

    With b = -F and V = dF/dx, G(x_f, t_f | x_i, t_i) equals the forward
    transition density from x_f at forward time t_i to x_i at forward time
    t_f. Returns a callable usable as ``analytic`` in :func:`discretize_kernel`.
    """

    def fn(x, a, c):
        k = forward_kernel(x, t_i, t_f)  # one Gaussian per data-side node x_f
        logv = _gauss_matrix(x, k.mean, k.variance).T  # [x_f, x_i]
        return logv, float(np.sqrt(np.min(k.variance)))

    return fn


# -- Schrodinger system ------------------------------------------------------------------


@dataclass
class BridgeSolution:
    log_chi_i: np.ndarray
    log_chi_f: np.ndarray
    kernel: KernelMatrix
    iterations: int
    converged: bool
    residual_history: list = field(default_factory=list)
    bridge_path: Field | None = None

    @property
    def space(self) -> SpatialGrid:
        return self.kernel.space

    @property
    def log_h_star(self) -> np.ndarray:
        """log H*(x_f | x_i) = log G + log chi_f - log chi_i, indexed [target, source]."""
        return self.kernel.log_values + self.log_chi_f[:, None] - self.log_chi_i[None, :]

    @property
    def h_star(self) -> np.ndarray:
        return np.exp(self.log_h_star)

    def normalization_error(self) -> float:
        """Worst |int H*(x_f | x_i) dx_f - 1| over source nodes."""
        return float(np.max(np.abs(self.space.weights @ self.h_star - 1.0)))

    def marginal_error(self, P_i: np.ndarray, P_f: np.ndarray) -> float:
        """Trapezoid L1 gap between H* applied to P_i and P_f."""
        w = self.space.weights
        return float(w @ np.abs(self.h_star @ (w * P_i) - P_f))

    def evolution_error(self) -> float:
        """Worst relative gap in chi_i = int chi_f G dx_f."""
        w = self.space.weights
        lhs = logsumexp(self.kernel.log_values + (self.log_chi_f + np.log(w))[:, None], axis=0)
        return float(np.max(np.abs(np.expm1(lhs - self.log_chi_i))))

    def gauge_fixed(self) -> tuple[np.ndarray, np.ndarray]:
        """(log chi_i, log chi_f) shifted so that chi_f has unit trapezoid mass."""
        c = logsumexp(self.log_chi_f + np.log(self.space.weights))
        return self.log_chi_i - c, self.log_chi_f - c

    def scaled(self, c: float) -> "BridgeSolution":
        """Multiply both potentials by c (leaves H* unchanged)."""
        lc = math.log(c)
        return BridgeSolution(self.log_chi_i + lc, self.log_chi_f + lc, self.kernel, self.iterations,
                              self.converged, list(self.residual_history), self.bridge_path)


def _safe_log(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(p, dtype=float))


def solve_schrodinger_system(
    P_i: np.ndarray,
    P_f: np.ndarray,
    G: KernelMatrix,
    tol: float = 1e-12,
    max_iter: int = 20_000,
) -> BridgeSolution:
    """Find chi_i, chi_f with chi_i = G^T chi_f and P_f = chi_f G (P_i / chi_i).

    Alternating (Sinkhorn) updates in log space; the residual recorded per
    iteration is the trapezoid L1 gap of the final marginal, the other
    condition holding exactly after each sweep.
    """
    sp = G.space
    P_i = np.asarray(P_i, dtype=float)
    P_f = np.asarray(P_f, dtype=float)
    if np.any(P_i < 0) or np.any(P_f < 0):
        raise BridgeError("marginals must be non-negative")
    for name, p in (("P_i", P_i), ("P_f", P_f)):
        if abs(sp.integrate(p) - 1.0) > 1e-6:
            raise BridgeError(f"{name} is not normalized on the grid")
    if not np.all(np.isfinite(G.log_values)):
        raise BridgeError("kernel must be strictly positive on the grid")
    logw = np.log(sp.weights)
    log_pi, log_pf = _safe_log(P_i), _safe_log(P_f)
    logG = G.log_values
    log_chi_f = np.zeros(sp.m)
    history = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        log_chi_i = logsumexp(logG + (log_chi_f + logw)[:, None], axis=0)
        phi = np.where(np.isfinite(log_pi), log_pi - log_chi_i + logw, -np.inf)
        push = logsumexp(logG + phi[None, :], axis=1)
        if np.any(~np.isfinite(push) & np.isfinite(log_pf)):
            raise BridgeError("P_f has mass where the kernel carries none from P_i")
        model = np.exp(log_chi_f + push)
        resid = float(sp.weights @ np.abs(model - P_f))
        history.append(resid)
        log_chi_f = np.where(np.isfinite(log_pf), log_pf - push, -np.inf)
        if resid < tol:
            converged = True
            break
    log_chi_i = logsumexp(logG + (log_chi_f + logw)[:, None], axis=0)
    if not converged:
        raise BridgeError(f"Schrodinger system not solved after {max_iter} sweeps; last residual {history[-1]:.3g}")
    return BridgeSolution(log_chi_i, log_chi_f, G, it, converged, history)


def log_cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def bridge_path(solution: BridgeSolution, spec_G: ProcessSpec, P_i: np.ndarray, n_steps: int = 400) -> Field:
    """Evolve P_i under drift b + D d/dx ln chi with chi solved backward from chi_f."""
    sp = solution.space
    time = make_time_grid(solution.kernel.t_i, solution.kernel.t_f, n_steps)
    chi_f = np.exp(solution.log_chi_f - np.max(solution.log_chi_f))
    chi = solve_backward_kolmogorov(spec_G, chi_f, sp, time, kind="control")
    with np.errstate(divide="ignore"):
        logchi = np.log(np.maximum(chi.values, 1e-300))
    dlog = np.diff(logchi, axis=1) / sp.h  # at interfaces

    def drift(x, t):
        s = time.index_of(t)
        return np.asarray(spec_G.drift(x, t)) + spec_G.D(t) * np.interp(x, sp.interfaces, dlog[s])

    spec_H = ProcessSpec(drift, spec_G.diffusion)
    return solve_fokker_planck(spec_H, P_i, sp, time, flux="central")


# -- Gaussian bridge oracle --------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianBridge:
    """chi_f(y) = exp(-A y^2 / 2 + B y) for pure-diffusion G with variance s2."""

    A: float
    B: float
    s2: float

    def h_star_density(self, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        """H*(y | x) on the outer grid [y, x]."""
        prec = 1.0 / self.s2 + self.A
        mean = (x / self.s2 + self.B) / prec
        return np.exp(-0.5 * prec * (y[:, None] - mean[None, :]) ** 2) * math.sqrt(prec / (2 * math.pi))


def gaussian_bridge(m0: float, v0: float, m1: float, v1: float, s2: float) -> GaussianBridge:
    """Solve the Schrodinger system for N(m0, v0) -> N(m1, v1) under N(x, s2) transitions.

    Gaussian potentials turn both integral equations into conditions on
    precisions and linear coefficients; the remaining two unknowns are found
    with a root finder.
    """

    def equations(z):
        A, B = z
        kappa = 1.0 / s2 + A
        if kappa <= 0:
            return [1e6, 1e6]
        Ai = 1.0 / s2 - 1.0 / (s2 * s2 * kappa)  # chi_i precision
        Bi = B / (s2 * kappa)
        p_phi = 1.0 / v0 - Ai  # phi = P_i / chi_i
        l_phi = m0 / v0 - Bi
        if p_phi <= 0:
            return [1e6, 1e6]
        var_psi = s2 + 1.0 / p_phi
        mean_psi = l_phi / p_phi
        return [A + 1.0 / var_psi - 1.0 / v1, B + mean_psi / var_psi - m1 / v1]

    sol, info, ok, msg = fsolve(equations, [0.0, 0.0], xtol=1e-14, full_output=True)
    if ok != 1 or np.max(np.abs(equations(sol))) > 1e-10:
        raise BridgeError(f"Gaussian bridge fixed point failed: {msg}")
    return GaussianBridge(float(sol[0]), float(sol[1]), s2)


# -- DPM posterior and reverse kernel --------------------------------------------------------------


def _kernel_logpdf(kernel: TransitionFn, x_src: np.ndarray, s: float, t: float, x_dst: np.ndarray) -> np.ndarray:
    """log K(x_dst[i] at t | x_src[j] at s) as a [dst, src] array."""
    k = kernel(np.asarray(x_src, dtype=float), s, t)
    return _gauss_matrix(np.asarray(x_dst, dtype=float), k.mean, k.variance)


def dpm_posterior_q(
    kernel: TransitionFn,
    tau: float,
    t: float,
    x0: float,
    x: float,
    xi_grid: np.ndarray,
    t_i: float = 0.0,
    norm_tol: float = 1e-6,
) -> np.ndarray:
    """Q(xi, tau | x, t; x0, t_i) = P(x, t | xi, tau) P(xi, tau | x0, t_i) / P(x, t | x0, t_i) on ``xi_grid``.

    All times are forward times with t_i < tau < t.
    """
    if not t_i < tau < t:
        raise BridgeError("need t_i < tau < t")
    xi = np.asarray(xi_grid, dtype=float)
    log_a = _kernel_logpdf(kernel, xi, tau, t, np.array([x]))[0]
    log_b = _kernel_logpdf(kernel, np.array([x0]), t_i, tau, xi)[:, 0]
    log_den = float(_kernel_logpdf(kernel, np.array([x0]), t_i, t, np.array([x]))[0, 0])
    if log_den < -700:
        raise BridgeError(f"P(x, t | x0, t_i) underflows at x={x!r}")
    q = np.exp(log_a + log_b - log_den)
    h = xi[1] - xi[0]
    mass = h * (q.sum() - 0.5 * (q[0] + q[-1]))
    if abs(mass - 1.0) > norm_tol:
        raise BridgeError(f"posterior mass {mass:.8f} on xi grid; widen or refine it")
    return q


def gaussian_posterior(mean_fwd_factor: float, var_fwd: float, mean_prior: float, var_prior: float, x: float) -> tuple[float, float]:
    """Posterior of xi ~ N(mean_prior, var_prior) given x ~ N(factor xi, var_fwd)."""
    prec = 1.0 / var_prior + mean_fwd_factor**2 / var_fwd
    mean = (mean_prior / var_prior + mean_fwd_factor * x / var_fwd) / prec
    return mean, 1.0 / prec


def data_measure(mixture: GaussianMixture, x0_grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature nodes and weights (density x trapezoid weight) for a data mixture."""
    x0 = np.asarray(x0_grid, dtype=float)
    w = np.full(x0.size, x0[1] - x0[0])
    w[0] = w[-1] = 0.5 * (x0[1] - x0[0])
    return x0, w * mixture.pdf(x0)


def dpm_reverse_kernel_r(
    kernel: TransitionFn,
    data: tuple[np.ndarray, np.ndarray],
    tau: float,
    t: float,
    xi_grid: np.ndarray,
    x_grid: np.ndarray,
    t_i: float = 0.0,
) -> np.ndarray:
    """R(xi, tau | x, t) = int dx0 Q(xi | x; x0) P(x, t | x0) P_data(x0) / P(x, t), as [x, xi].

    ``data`` is a discrete measure (nodes, weights); a point mass is
    ``(np.array([x0]), np.array([1.0]))``. Forward times with t_i < tau < t.
    """
    if not t_i < tau < t:
        raise BridgeError("need t_i < tau < t")
    x0, w0 = (np.asarray(a, dtype=float) for a in data)
    xi = np.asarray(xi_grid, dtype=float)
    x = np.asarray(x_grid, dtype=float)
    log_w0 = _safe_log(w0)
    # log P(x, t | xi, tau): [x, xi]
    log_fwd = _kernel_logpdf(kernel, xi, tau, t, x)
    # log P(xi, tau) = log sum_x0 w0 P(xi, tau | x0): [xi]
    log_p_tau = logsumexp(_kernel_logpdf(kernel, x0, t_i, tau, xi) + log_w0[None, :], axis=1)
    log_p_t = logsumexp(_kernel_logpdf(kernel, x0, t_i, t, x) + log_w0[None, :], axis=1)
    if np.any(log_p_t < -700):
        raise BridgeError("P(x, t) underflows on part of the x grid")
    # Q P(x,t|x0) = P(x,t|xi) P(xi,tau|x0); integrating x0 against the data gives P(x,t|xi) P(xi,tau)
    return np.exp(log_fwd + log_p_tau[None, :] - log_p_t[:, None])


def propagate_r(R: np.ndarray, p_t: np.ndarray, x_grid: np.ndarray) -> np.ndarray:
    """int R(xi | x) P(x, t) dx by the trapezoid rule over ``x_grid``."""
    x = np.asarray(x_grid, dtype=float)
    w = np.full(x.size, x[1] - x[0])
    w[0] = w[-1] = 0.5 * (x[1] - x[0])
    return (w * p_t) @ R


def gaussian_reverse_step(F_rev: np.ndarray, D: float, dt: float, x_grid: np.ndarray, xi_grid: np.ndarray) -> np.ndarray:
    """One Euler-Maruyama step of the reverse SDE as a kernel [x, xi]: N(xi; x + F_rev(x) dt, D dt)."""
    x = np.asarray(x_grid, dtype=float)
    mean = x + np.asarray(F_rev, dtype=float) * dt
    return np.exp(_gauss_matrix(np.asarray(xi_grid, dtype=float), mean, np.full(x.size, D * dt))).T
