import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from actiondiff.action import (
    ActionError,
    ControlAssignment,
    action_value,
    boundary_form_action,
    boundary_sign_discrepancy,
    delta_action,
    stationarity_residuals,
    tabulated_control,
)
from actiondiff.exact_mixture import GaussianMixture, evolve_mixture
from actiondiff.pde_grid import Field, SpatialGrid, gaussian_on_grid, solve_fokker_planck
from actiondiff.schedule import make_time_grid, ou_schedule
from actiondiff.sde_sim import ProcessSpec

SPACE = SpatialGrid(-4, 4, 81)
TIME = make_time_grid(0, 0.2, 40)
D = lambda t: 1.0 + t


def explicit_path(drift, mean=0.3, var=0.4):
    spec = ProcessSpec(drift, D)
    p0 = gaussian_on_grid(SPACE, mean, var)
    return solve_fokker_planck(spec, p0 / SPACE.integrate(p0), SPACE, TIME, scheme="explicit", flux="central")


def smooth_lambda(seed=0):
    rng = np.random.default_rng(seed)
    c = rng.normal(size=4)
    x, t = SPACE.x, TIME.nodes[:, None]
    vals = c[0] * np.sin(x) + c[1] * x**2 / 8 + c[2] * t * x + c[3] * np.cos(2 * x + t)
    return Field(vals, SPACE, TIME, "multiplier")


def control(u, b=lambda x, t: -0.5 * x, V=None):
    return ControlAssignment(u, b, D, V)


def test_action_vanishes_on_discrete_solution():
    b = lambda x, t: -0.5 * x
    P = explicit_path(b)
    c = control(lambda x, t: 0 * x, b)
    assert abs(action_value(smooth_lambda(), P, c)) < 1e-12


@given(st.floats(-5, 5))
def test_constant_shift_of_lambda(shift):
    # P conserves mass but does not solve the controlled equation
    P = explicit_path(lambda x, t: np.sin(x))
    c = control(lambda x, t: 0.3 * np.cos(x))
    lam = smooth_lambda(1)
    moved = Field(lam.values + shift, SPACE, TIME, "multiplier")
    assert abs(action_value(moved, P, c) - action_value(lam, P, c)) < 1e-10


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_boundary_form_matches_integrated_form(seed):
    P = explicit_path(lambda x, t: np.sin(x), mean=-0.5)
    c = control(lambda x, t: 0.3 * np.cos(x) + t, V=lambda x, t: 0.1 * x[:, 0] ** 2)
    lam = smooth_lambda(seed)
    integrated = action_value(lam, P, c)
    assert abs(boundary_form_action(lam, P, c) - integrated) < 1e-6
    printed = boundary_form_action(lam, P, c, sign="printed")
    assert printed - integrated == pytest.approx(boundary_sign_discrepancy(lam, P), abs=1e-10)
    assert abs(boundary_sign_discrepancy(lam, P)) > 1e-3


def test_boundary_form_rejects_unknown_sign():
    P = explicit_path(lambda x, t: 0 * x)
    with pytest.raises(ActionError):
        boundary_form_action(smooth_lambda(), P, control(lambda x, t: 0 * x), sign="other")


def test_grid_mismatch():
    P = explicit_path(lambda x, t: 0 * x)
    other = Field(np.zeros((41, 41)), SpatialGrid(-4, 4, 41), TIME, "multiplier")
    with pytest.raises(ActionError):
        action_value(other, P, control(lambda x, t: 0 * x))


def test_equilibrium_residuals_vanish():
    sp = SpatialGrid(-1, 1, 41)
    P = Field(np.full((TIME.n + 1, sp.m), 0.5), sp, TIME)
    lam = Field(np.full((TIME.n + 1, sp.m), 2.0), sp, TIME, "multiplier")
    r = stationarity_residuals(lam, P, ControlAssignment(lambda x, t: 0 * x, lambda x, t: 0 * x, D))
    assert max(r.fp, r.hjb, r.control) < 1e-10


def test_control_residual_detects_wrong_control():
    P = explicit_path(lambda x, t: -0.5 * x)
    lam = smooth_lambda(3)
    r = stationarity_residuals(lam, P, control(lambda x, t: 0 * x))
    assert r.control > 0.1


def test_log_transform_residual():
    P = explicit_path(lambda x, t: -0.5 * x)
    lam = Field(-np.log(P.values), SPACE, TIME, "multiplier")
    chi = Field(P.values, SPACE, TIME, "control")
    r = stationarity_residuals(lam, P, control(lambda x, t: 0 * x), chi=chi)
    assert r.log_transform < 1e-12


def optimal_table(lam):
    """u = -D d/dx lambda on every interface and time node."""
    return np.stack([-D(t) * np.diff(lam.values[s]) / SPACE.h for s, t in enumerate(TIME.nodes)])


def test_optimal_control_zeroes_control_residual():
    P = explicit_path(lambda x, t: -0.5 * x)
    lam = smooth_lambda(4)
    c = control(tabulated_control(SPACE, TIME, optimal_table(lam)))
    assert stationarity_residuals(lam, P, c).control < 1e-12


@given(st.integers(0, 1000), st.floats(1e-3, 1.0))
def test_action_minimized_at_optimal_control(seed, scale):
    P = explicit_path(lambda x, t: -0.5 * x)
    lam = smooth_lambda(5)
    best = optimal_table(lam)
    direction = np.random.default_rng(seed).normal(size=best.shape)
    base = action_value(lam, P, control(tabulated_control(SPACE, TIME, best)))
    for sgn in (1.0, -1.0):
        moved = action_value(lam, P, control(tabulated_control(SPACE, TIME, best + sgn * scale * direction)))
        assert moved >= base - 1e-10


def test_tabulated_control_shape_and_off_interface():
    with pytest.raises(ActionError):
        tabulated_control(SPACE, TIME, np.zeros((3, 3)))
    u = tabulated_control(SPACE, TIME, np.zeros((TIME.n + 1, SPACE.m - 1)))
    with pytest.raises(ActionError):
        u(np.array([[0.01]]), 0.0)


# -- excess action --------------------------------------------------------------------

G = make_time_grid(0.1, 1.0, 30)
SCHED = ou_schedule(lambda t: 1 + t, lambda t: 1 + t, G)
MIX = GaussianMixture([0.3, 0.7], [-1.0, 1.2], [0.1, 0.3])
PATH = evolve_mixture(MIX, SCHED, G)
X = np.linspace(-10, 10, 4001)
WEIGHT_SUM = sum(0.5 * float(SCHED.diffusion_at(G.nodes[k])) * float(G.nodes[k] - G.nodes[k - 1]) for k in range(1, G.n + 1))


def exact(x, t):
    return PATH.at(t).score(x)


def test_delta_action_exact_score_is_zero():
    assert delta_action(exact, PATH, SCHED, G, X) < 1e-10


@pytest.mark.parametrize("eps", [0.1, -0.5, 2.0])
def test_delta_action_constant_offset(eps):
    got = delta_action(lambda x, t: exact(x, t) + eps, PATH, SCHED, G, X)
    assert got == pytest.approx(eps * eps * WEIGHT_SUM, abs=1e-8)


def test_delta_action_is_quadratic():
    g = lambda x, t: np.sin(x) * (1 + t)
    r = [delta_action(lambda x, t: exact(x, t) + e * g(x, t), PATH, SCHED, G, X) / e**2 for e in (1e-2, 1e-3)]
    assert abs(r[0] / r[1] - 1) < 0.01


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.1, 3))
def test_delta_action_positive_for_perturbations(a, b, k):
    if abs(a) + abs(b) < 1e-3:
        return
    got = delta_action(lambda x, t: exact(x, t) + a * np.tanh(k * x) + b, PATH, SCHED, G, X)
    assert got > 0


def test_delta_action_monte_carlo_and_field():
    eps = 0.3
    S = lambda x, t: exact(x, t) + eps
    mc = delta_action(S, PATH, SCHED, G, method="monte_carlo", n_mc=1000, seed=1)
    assert mc == pytest.approx(eps * eps * WEIGHT_SUM, rel=1e-12)
    sp = SpatialGrid(-10, 10, 4001)
    field = Field(np.stack([PATH.at(float(t)).pdf(sp.x) for t in G.nodes]), sp, G)
    assert delta_action(exact, field, SCHED, G) < 1e-6
    with pytest.raises(ActionError):
        delta_action(S, PATH, SCHED, G)
