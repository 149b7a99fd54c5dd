"""Discrete optimal-control action, its stationarity conditions and the excess action.

The controlled process H has drift b + u and the reference G has drift b and
killing rate V_G; both share D(t). On the spatial grid the action uses the
same finite-volume generator as :mod:`pde_grid` with the central flux (which
is linear in the drift). Time derivatives are forward differences,
controls live on cell interfaces, and the kinetic term is
sum_{i+1/2} h P_{i+1/2} u_{i+1/2}^2 / 2D with P_{i+1/2} the interface average.
With these choices the stationarity conditions of the discrete action are
exactly the discrete Fokker-Planck, HJB and control equations computed by
:func:`stationarity_residuals`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .exact_mixture import GaussianMixture, MixturePath, evolve_to
from .pde_grid import Field, SpatialGrid, banded_matvec, banded_to_dense, forward_operator
from .schedule import NoiseSchedule, TimeGrid, make_time_grid
from .sde_sim import ProcessSpec

FieldFn = Callable[[np.ndarray, float], np.ndarray]
FLUX = "central"


class ActionError(ValueError):
    pass


@dataclass(frozen=True)
class ControlAssignment:
    """F_H = b + u and F_G = b, with G killed at rate V_G."""

    u: FieldFn
    b: FieldFn
    diffusion: Callable[[float], float]
    V_G: Callable[[np.ndarray, float], np.ndarray] | None = None

    def D(self, t: float) -> float:
        return float(np.asarray(self.diffusion(t)))

    def spec_H(self) -> ProcessSpec:
        u, b = self.u, self.b
        return ProcessSpec(lambda x, t: np.asarray(b(x, t)) + np.asarray(u(x, t)), self.diffusion)

    def spec_G(self) -> ProcessSpec:
        return ProcessSpec(self.b, self.diffusion, killing=self.V_G)

    def with_control(self, u: FieldFn) -> "ControlAssignment":
        return ControlAssignment(u, self.b, self.diffusion, self.V_G)


def tabulated_control(space: SpatialGrid, time: TimeGrid, values: np.ndarray) -> FieldFn:
    """Control given by interface values ``values[s, i]`` at (x_{i+1/2}, t_s)."""
    values = np.asarray(values, dtype=float)
    if values.shape != (time.n + 1, space.m - 1) and values.shape != (time.n, space.m - 1):
        raise ActionError("tabulated control must have one row per time node and one column per interface")
    xi = space.interfaces

    def u(x, t):
        s = time.index_of(t)
        pts = np.asarray(x, dtype=float).reshape(-1)
        idx = np.clip(np.rint((pts - xi[0]) / space.h).astype(int), 0, xi.size - 1)
        if np.max(np.abs(xi[idx] - pts)) > 1e-9 * max(1.0, space.h):
            raise ActionError("tabulated control evaluated away from interfaces")
        return values[s, idx].reshape(np.shape(x))

    return u


# -- discrete ingredients ---------------------------------------------------------------


def _check_fields(lam: Field, P: Field) -> None:
    if lam.space != P.space or lam.time.nodes.shape != P.time.nodes.shape or np.any(lam.time.nodes != P.time.nodes):
        raise ActionError("lambda and density fields live on different grids")


def _interface_control(control: ControlAssignment, space: SpatialGrid, t: float) -> np.ndarray:
    return np.asarray(control.u(space.interfaces[:, None], t), dtype=float).reshape(-1)


def _killing(control: ControlAssignment, space: SpatialGrid, t: float) -> np.ndarray:
    if control.V_G is None:
        return np.zeros(space.m)
    return np.asarray(control.V_G(space.x[:, None], t), dtype=float).reshape(-1)


def _step_data(control: ControlAssignment, space: SpatialGrid, t: float):
    u = _interface_control(control, space, t)
    A = forward_operator(control.spec_H(), space, t, FLUX)
    return u, A, _killing(control, space, t), control.D(t)


def _kinetic(P: np.ndarray, u: np.ndarray, D: float, h: float) -> float:
    pbar = 0.5 * (P[1:] + P[:-1])
    return float(h * np.sum(pbar * u**2) / (2.0 * D))


def action_value(lam: Field, P: Field, control: ControlAssignment) -> float:
    """Integrated form: sum_s dt_s [kinetic + <V_G, P_s>] - <lambda_s, P_{s+1} - P_s - dt_s L^dagger_s P_s>."""
    _check_fields(lam, P)
    space, w = P.space, P.space.weights
    total = 0.0
    for s, dt in enumerate(P.time.steps):
        t = float(P.time.nodes[s])
        u, A, V, D = _step_data(control, space, t)
        p = P.values[s]
        constraint = P.values[s + 1] - p - dt * banded_matvec(A, p)
        total += dt * (_kinetic(p, u, D, space.h) + float(w @ (V * p))) - float(w @ (lam.values[s] * constraint))
    return total


def boundary_form_action(lam: Field, P: Field, control: ControlAssignment, sign: str = "consistent") -> float:
    """Action with the operators moved onto lambda (dense adjoint matrices).

    Bulk: sum_s dt_s <P_s, kinetic density + V_G + L_s lambda_s> + <lambda_{s+1} - lambda_s, P_{s+1}>.
    Boundary: s_b (<lambda_0, P_0> - <lambda_n, P_n>) with s_b = +1 for
    ``sign="consistent"`` (the sign summation by parts produces) and s_b = -1
    for ``sign="printed"``.
    """
    _check_fields(lam, P)
    if sign not in ("consistent", "printed"):
        raise ActionError("sign must be 'consistent' or 'printed'")
    space, w = P.space, P.space.weights
    W, Winv = np.diag(w), np.diag(1.0 / w)
    L_ = lam.values
    total = 0.0
    for s, dt in enumerate(P.time.steps):
        t = float(P.time.nodes[s])
        u, A, V, D = _step_data(control, space, t)
        L = Winv @ banded_to_dense(A).T @ W
        p = P.values[s]
        total += dt * (_kinetic(p, u, D, space.h) + float(w @ (p * (V + L @ L_[s]))))
        total += float(w @ ((L_[s + 1] - L_[s]) * P.values[s + 1]))
    boundary = float(w @ (L_[0] * P.values[0])) - float(w @ (L_[-1] * P.values[-1]))
    return total + (1.0 if sign == "consistent" else -1.0) * boundary


def boundary_sign_discrepancy(lam: Field, P: Field) -> float:
    """printed-sign value minus integrated value: -2 (<lambda_0, P_0> - <lambda_n, P_n>)."""
    w = P.space.weights
    return -2.0 * (float(w @ (lam.values[0] * P.values[0])) - float(w @ (lam.values[-1] * P.values[-1])))


@dataclass
class Residuals:
    fp: float
    hjb: float
    control: float
    log_transform: float | None = None

    def to_dict(self) -> dict:
        out = {"fp": self.fp, "hjb": self.hjb, "control": self.control}
        if self.log_transform is not None:
            out["log_transform"] = self.log_transform
        return out


def stationarity_residual_fields(lam: Field, P: Field, control: ControlAssignment):
    """Pointwise residual arrays (fp[s, i], hjb[s, i], control[s, i+1/2])."""
    _check_fields(lam, P)
    space = P.space
    n = P.time.n
    fp = np.zeros((n, space.m))
    hjb = np.zeros((max(n - 1, 0), space.m))
    ctrl = np.zeros((n, space.m - 1))
    w = space.weights
    for s, dt in enumerate(P.time.steps):
        t = float(P.time.nodes[s])
        u, A, V, D = _step_data(control, space, t)
        p, l = P.values[s], lam.values[s]
        fp[s] = (P.values[s + 1] - p) / dt - banded_matvec(A, p)
        ctrl[s] = u / D + np.diff(l) / space.h
        if s >= 1:
            # d(kinetic)/dP_i divided by the cell width w_i
            u2 = u**2 / (2.0 * D)
            kin = np.zeros(space.m)
            kin[:-1] += 0.5 * space.h * u2
            kin[1:] += 0.5 * space.h * u2
            kin /= w
            Ll = _adjoint_apply(A, l, w)
            hjb[s - 1] = (l - lam.values[s - 1]) / dt + Ll + kin + V
    return fp, hjb, ctrl


def _adjoint_apply(A: np.ndarray, v: np.ndarray, w: np.ndarray) -> np.ndarray:
    """(W^{-1} A^T W) v for banded A."""
    wv = w * v
    out = A[1] * wv
    out[1:] += A[0, 1:] * wv[:-1]
    out[:-1] += A[2, :-1] * wv[1:]
    return out / w


def stationarity_residuals(
    lam: Field,
    P: Field,
    control: ControlAssignment,
    window: tuple[float, float] | None = None,
    chi: Field | None = None,
) -> Residuals:
    """Max-norm residuals of the discrete FP, HJB and control equations.

    ``window`` restricts the max to nodes (and interfaces) inside [lo, hi],
    which keeps wall nodes and far tails out of the measurement.
    """
    fp, hjb, ctrl = stationarity_residual_fields(lam, P, control)
    x, xi = P.space.x, P.space.interfaces
    if window is None:
        mx, mi = np.ones(x.size, bool), np.ones(xi.size, bool)
    else:
        mx = (x >= window[0]) & (x <= window[1])
        mi = (xi >= window[0]) & (xi <= window[1])
    amax = lambda a, m: float(np.max(np.abs(a[:, m]))) if a.size else 0.0
    lt = None
    if chi is not None:
        if np.any(chi.values <= 0):
            raise ActionError("chi must be positive")
        lt = float(np.max(np.abs(lam.values + np.log(chi.values))[:, mx]))
    return Residuals(amax(fp, mx), amax(hjb, mx), amax(ctrl, mi), lt)


# -- excess action -------------------------------------------------------------------------


ScoreFn = Callable[[np.ndarray, float], np.ndarray]


def _field_score(field: Field, s: int) -> np.ndarray:
    p = field.values[s]
    if np.any(p <= 0):
        raise ActionError("density field must be positive to take its score")
    return np.gradient(np.log(p), field.space.h)


def delta_action(
    S: ScoreFn,
    path: MixturePath | Field,
    schedule: NoiseSchedule,
    grid: TimeGrid,
    x_grid: np.ndarray | None = None,
    method: str = "quadrature",
    n_mc: int = 10_000,
    seed: int = 0,
) -> float:
    """1/2 sum_k D(t_k) (t_k - t_{k-1}) E_{P(., t_k)} |S(x, t_k) - d/dx ln P(x, t_k)|^2, k = 1..n.

    Times are forward times; node k carries the step that the reverse
    process takes from t_k down to t_{k-1}. ``method="quadrature"`` uses the
    trapezoid rule on a uniform 1-D ``x_grid`` (or the field's own grid);
    ``method="monte_carlo"`` samples x ~ P(., t_k) from a mixture path and
    works in any dimension.
    """
    nodes = grid.nodes
    if method not in ("quadrature", "monte_carlo"):
        raise ActionError(f"unknown method {method!r}")
    rng = np.random.default_rng(seed)
    total = 0.0
    for k in range(1, nodes.size):
        t = float(nodes[k])
        weight = 0.5 * float(schedule.diffusion_at(t)) * float(nodes[k] - nodes[k - 1])
        if isinstance(path, Field):
            if method != "quadrature":
                raise ActionError("density fields only support quadrature")
            s = path.time.index_of(t)
            x = path.space.x
            dens = path.values[s]
            true = _field_score(path, s)[:, None]
            w = path.space.weights
            est = np.asarray(S(x[:, None], t), dtype=float).reshape(x.size, -1)
            total += weight * float(w @ (dens * np.sum((est - true) ** 2, axis=1)))
            continue
        mix = path.at(t)
        if method == "quadrature":
            if x_grid is None:
                raise ActionError("x_grid is required for quadrature over a mixture path")
            x = np.asarray(x_grid, dtype=float)
            pts = x[:, None]
            w = np.full(x.size, x[1] - x[0])
            w[0] = w[-1] = 0.5 * (x[1] - x[0])
            err = np.asarray(S(pts, t), dtype=float).reshape(pts.shape) - mix.score(pts)
            total += weight * float(w @ (mix.pdf(pts) * np.sum(err**2, axis=1)))
        else:
            pts = mix.sample(n_mc, rng)
            err = np.asarray(S(pts, t), dtype=float).reshape(pts.shape) - mix.score(pts)
            total += weight * float(np.mean(np.sum(err**2, axis=1)))
    return total


# -- reverse-diffusion solution of the control problem -------------------------------------


@dataclass
class ReverseDiffusionFields:
    lam: Field
    P: Field
    chi: Field
    control: ControlAssignment


def reverse_diffusion_fields(
    mixture: GaussianMixture,
    schedule: NoiseSchedule,
    forward_drift: FieldFn,
    forward_drift_dx: FieldFn,
    space: SpatialGrid,
    window: tuple[float, float],
    n_steps: int,
    kind: str = "ou",
) -> ReverseDiffusionFields:
    """Exact fields of the reverse-diffusion solution, sampled on grids.

    Forward time t' runs over ``window = (a, c)``; the control problem runs in
    t = a + c - t'. The density is P(x, t) = P_mix(x, t'), the multiplier
    lambda = -ln P (chi = P), the control u = D d/dx ln P, the uncontrolled
    drift b = -F and the reference killing rate V_G = dF/dx.
    """
    a, c = window
    time = make_time_grid(a, c, n_steps)
    fwd = lambda t: a + c - t
    t0 = float(schedule.grid.t_start)

    def snapshot(t):
        return evolve_to(mixture, schedule, t0, fwd(t), kind)

    x = space.x
    P = np.stack([snapshot(float(t)).pdf(x) for t in time.nodes])
    logp = np.stack([snapshot(float(t)).logpdf(x) for t in time.nodes])
    D = lambda t: float(schedule.diffusion_at(fwd(t)))

    def u(pts, t):
        return D(t) * snapshot(t).score(pts)

    def b(pts, t):
        return -np.asarray(forward_drift(pts, fwd(t)), dtype=float)

    def V(pts, t):
        return np.asarray(forward_drift_dx(pts, fwd(t)), dtype=float).reshape(-1)

    control = ControlAssignment(u, b, D, V)
    return ReverseDiffusionFields(
        Field(-logp, space, time, "multiplier"),
        Field(P, space, time, "density"),
        Field(P, space, time, "control"),
        control,
    )
