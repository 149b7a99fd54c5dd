import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from actiondiff.pde_grid import (
    Field,
    PDEError,
    SpatialGrid,
    backward_operator,
    banded_to_dense,
    forward_operator,
    gaussian_on_grid,
    pairing,
    reverse_time_relabel,
    solve_backward_kolmogorov,
    solve_fokker_planck,
)
from actiondiff.schedule import make_time_grid, ou_schedule
from actiondiff.sde_sim import ProcessSpec, feynman_kac_expectation, ou_process, pure_diffusion_process

SPACE = SpatialGrid(-8, 8, 801)


def test_grid_validation():
    with pytest.raises(PDEError):
        SpatialGrid(1, 1, 10)
    with pytest.raises(PDEError):
        SpatialGrid(0, 1, 2)
    assert SpatialGrid(-1, 1, 5).h == 0.5


def test_pure_diffusion_matches_convolution():
    g = make_time_grid(0, 0.5, 100)
    P = solve_fokker_planck(pure_diffusion_process(1.0), gaussian_on_grid(SPACE, 0, 0.25), SPACE, g)
    assert np.max(np.abs(P.values[-1] - gaussian_on_grid(SPACE, 0, 0.75))) < 1e-4


def test_equilibrium_is_stationary():
    g = make_time_grid(0, 1, 50)
    spec = ProcessSpec(lambda x, t: -x, lambda t: 2.0)
    P = solve_fokker_planck(spec, gaussian_on_grid(SPACE, 0, 1), SPACE, g)
    assert np.max(np.abs(P.values - P.values[0])) < 1e-6


@pytest.mark.filterwarnings("ignore:clipped")
@pytest.mark.parametrize("scheme,n", [("cn", 400), ("explicit", 10000)])
def test_mass_conserved(scheme, n):
    # double-well drift, domain kept where the drift is moderate
    sp = SpatialGrid(-3, 3, 301)
    g = make_time_grid(0, 1, n)
    spec = ProcessSpec(lambda x, t: -4 * x * (x * x - 1), lambda t: 1.0)
    p0 = gaussian_on_grid(sp, 0.5, 0.3)
    # implicit startup steps damp the stiff wall modes that CN alone leaves oscillating
    P = solve_fokker_planck(spec, p0 / sp.integrate(p0), sp, g, scheme=scheme, startup_steps=4 if scheme == "cn" else 0)
    assert np.max(np.abs(P.mass() - 1)) < 1e-6
    assert P.values.min() >= -1e-12


def test_negative_values_are_clipped_and_counted():
    sp = SpatialGrid(-3, 3, 301)
    spec = ProcessSpec(lambda x, t: -4 * x * (x * x - 1), lambda t: 1.0)
    p0 = gaussian_on_grid(sp, 0.5, 0.3)
    with pytest.warns(RuntimeWarning, match="clipped"):
        P = solve_fokker_planck(spec, p0 / sp.integrate(p0), sp, make_time_grid(0, 1, 400))
    assert P.clip_count > 0 and P.values.min() >= -1e-12


def test_explicit_stability_violation():
    with pytest.raises(PDEError):
        solve_fokker_planck(pure_diffusion_process(1.0), gaussian_on_grid(SPACE, 0, 1), SPACE, make_time_grid(0, 1, 10), scheme="explicit")


def test_initial_density_checks():
    with pytest.raises(PDEError):
        solve_fokker_planck(pure_diffusion_process(1.0), -gaussian_on_grid(SPACE, 0, 1), SPACE, make_time_grid(0, 1, 4))
    with pytest.raises(PDEError):
        solve_fokker_planck(pure_diffusion_process(1.0), 2 * gaussian_on_grid(SPACE, 0, 1), SPACE, make_time_grid(0, 1, 4))


def test_backward_unit_terminal():
    g = make_time_grid(0, 1, 20)
    J = solve_backward_kolmogorov(ProcessSpec(lambda x, t: -x, lambda t: 0.7), np.ones(SPACE.m), SPACE, g)
    assert np.max(np.abs(J.values - 1)) < 1e-13


def test_backward_constant_killing():
    g = make_time_grid(0, 1, 200)
    spec = ProcessSpec(lambda x, t: np.zeros_like(x), lambda t: 1.0, killing=lambda x, t: 0.8 + 0 * x[:, 0])
    J = solve_backward_kolmogorov(spec, np.ones(SPACE.m), SPACE, g)
    expected = np.exp(-0.8 * (1 - g.nodes))
    assert np.max(np.abs(J.values - expected[:, None])) < 1e-6


def test_backward_linear_terminal_ou():
    beta = 1.0
    g = make_time_grid(0, 1, 100)
    J = solve_backward_kolmogorov(ou_process(ou_schedule(beta, 1.3, g)), SPACE.x, SPACE, g)
    inner = np.abs(SPACE.x) <= 4
    for s in (0, 50):
        expected = SPACE.x * math.exp(-beta * (1 - g.nodes[s]) / 2)
        assert np.max(np.abs(J.values[s] - expected)[inner]) < 1e-4


def test_duality_pairing_constant():
    g = make_time_grid(0, 1, 60)
    spec = ProcessSpec(lambda x, t: -x + np.sin(3 * t), lambda t: 1 + 0.5 * t)
    P = solve_fokker_planck(spec, gaussian_on_grid(SPACE, 1, 0.2), SPACE, g)
    J = solve_backward_kolmogorov(spec, np.tanh(SPACE.x), SPACE, g)
    pairs = [pairing(J.values[s], P.values[s], SPACE) for s in range(g.n + 1)]
    assert np.ptp(pairs) < 1e-6


def test_backward_operator_is_weighted_adjoint():
    spec = ProcessSpec(lambda x, t: np.cos(x), lambda t: 0.9)
    sp = SpatialGrid(-3, 3, 31)
    A = banded_to_dense(forward_operator(spec, sp, 0.0))
    L = banded_to_dense(backward_operator(spec, sp, 0.0))
    W = np.diag(sp.weights)
    assert np.allclose(W @ L, (W @ A).T, atol=1e-12)
    assert np.max(np.abs(L @ np.ones(sp.m))) < 1e-12


def test_second_order_spatial_convergence():
    # OU from N(1, 0.25): exact P(., 1) is Gaussian with known moments
    f, v = math.exp(-0.5), 0.25 * math.exp(-1) + 1 - math.exp(-1)
    errs = []
    for m, n in ((81, 40), (161, 80), (321, 160)):
        sp = SpatialGrid(-8, 8, m)
        g = make_time_grid(0, 1, n)
        P = solve_fokker_planck(ou_process(ou_schedule(1.0, 1.0, g)), gaussian_on_grid(sp, 1, 0.25), sp, g, check_mass=False)
        errs.append(np.max(np.abs(P.values[-1] - gaussian_on_grid(sp, f, v))))
    assert 3.5 < errs[0] / errs[1] < 4.5 and 3.5 < errs[1] / errs[2] < 4.5


def test_killed_pair_matches_feynman_kac():
    g = make_time_grid(0, 1, 200)
    spec = ProcessSpec(lambda x, t: -0.5 * x, lambda t: 1.0, killing=lambda x, t: 0.5 * x[:, 0] ** 2)
    J = solve_backward_kolmogorov(spec, np.exp(-SPACE.x**2), SPACE, g)
    P = solve_fokker_planck(spec, SPACE.point_mass(0.5), SPACE, g, startup_steps=4)
    # expectation from the killed forward density and from the backward solution
    from_forward = SPACE.integrate(P.values[-1] * np.exp(-SPACE.x**2))
    from_backward = np.interp(0.5, SPACE.x, J.values[0])
    mc, se = feynman_kac_expectation(spec, lambda x: np.exp(-x[:, 0] ** 2), (0.5, 0.0), g, 40_000, 12)
    assert abs(from_forward - from_backward) < 1e-4
    assert abs(mc - from_backward) < 3 * se + 5e-3  # Euler bias of the killing weight is O(dt)


def test_relabel_involution():
    g = make_time_grid(0.5, 2.0, 6)
    F = Field(np.random.default_rng(0).random((7, SPACE.m)), SPACE, g, "control")
    R = reverse_time_relabel(F)
    assert R.times[0] == 2.0 and R.times[-1] == 0.5
    assert np.array_equal(R.values, F.values)
    RR = reverse_time_relabel(R)
    assert np.array_equal(RR.times, F.times) and not RR.time_reversed


def test_relabeled_backward_solution_solves_forward_equation():
    # for F = 0 the relabelled chi evolves by the same (self-adjoint) diffusion operator
    g = make_time_grid(0, 1, 200)
    spec = pure_diffusion_process(1.0)
    chi = solve_backward_kolmogorov(spec, gaussian_on_grid(SPACE, 0, 0.5), SPACE, g, kind="control")
    rev = reverse_time_relabel(chi)
    fwd = solve_fokker_planck(spec, chi.values[-1], SPACE, g, check_mass=False)
    assert np.max(np.abs(fwd.values[::-1] - rev.values)) < 1e-4


def test_log_transform():
    g = make_time_grid(0, 1, 2)
    chi = Field(np.full((3, SPACE.m), math.e), SPACE, g, "control")
    lam = chi.log_transform()
    assert lam.kind == "multiplier" and np.allclose(lam.values, -1.0)
    with pytest.raises(PDEError):
        Field(np.zeros((3, SPACE.m)), SPACE, g, "control").log_transform()


def test_field_csv_round_trip(tmp_path):
    g = make_time_grid(0, 1, 3)
    sp = SpatialGrid(-1, 1, 5)
    F = Field(np.arange(20.0).reshape(4, 5) / 7, sp, g, "density")
    F.to_csv(tmp_path / "f.csv")
    back = Field.from_csv(tmp_path / "f.csv")
    assert np.array_equal(back.values, F.values) and back.space == sp


@given(st.floats(-2, 2), st.floats(0.2, 2.0), st.floats(0.1, 1.0))
def test_point_mass_and_gaussian_normalize(x0, var, D):
    assert SPACE.integrate(SPACE.point_mass(x0)) == pytest.approx(1.0, abs=1e-12)
    g = make_time_grid(0, 0.3, 10)
    P = solve_fokker_planck(pure_diffusion_process(D), gaussian_on_grid(SPACE, x0, var), SPACE, g)
    assert np.max(np.abs(P.mass() - 1)) < 1e-6
