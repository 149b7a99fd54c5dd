import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from actiondiff.divergence import (
    CellSystem,
    DivergenceError,
    compose,
    discrete_kl,
    exact_tail_probability,
    ink_experiment,
    optimal_transfer,
    pathwise_kl_closed,
    pathwise_kl_monte_carlo,
    tilted_outcome,
)
from actiondiff.exact_mixture import GaussianMixture, evolve_mixture
from actiondiff.pde_grid import SpatialGrid, gaussian_on_grid, solve_fokker_planck
from actiondiff.schedule import make_time_grid, ou_schedule
from actiondiff.sde_sim import ProcessSpec, ou_process

G3 = np.array([[0.6, 0.3, 0.1], [0.2, 0.6, 0.2], [0.1, 0.3, 0.6]])


def stochastic(rng, n=3, floor=0.02):
    m = rng.random((n, n)) + floor
    return m / m.sum(axis=1, keepdims=True)


def test_kl_identical_is_zero():
    assert discrete_kl([0.3, 0.7], [[0.2, 0.8], [0.5, 0.5]], [[0.2, 0.8], [0.5, 0.5]]) == 0.0


def test_kl_two_cell_example():
    kl = discrete_kl([1.0, 0.0], [[0.9, 0.1], [0.3, 0.7]], [[0.5, 0.5], [0.5, 0.5]])
    assert kl == pytest.approx(0.9 * math.log(1.8) + 0.1 * math.log(0.2), abs=1e-15)
    assert kl == pytest.approx(0.368, abs=1e-3)


def test_kl_support_violation_is_infinite():
    assert discrete_kl([1.0, 0.0], [[0.5, 0.5], [0.5, 0.5]], [[1.0, 0.0], [0.5, 0.5]]) == math.inf
    # zero h against zero g contributes nothing
    assert discrete_kl([1.0, 0.0], [[1.0, 0.0], [0.5, 0.5]], [[1.0, 0.0], [0.5, 0.5]]) == 0.0


def test_kl_input_validation():
    with pytest.raises(DivergenceError):
        discrete_kl([1.0, 0.0], [[0.9, 0.2], [0.5, 0.5]], [[0.5, 0.5], [0.5, 0.5]])
    with pytest.raises(DivergenceError):
        discrete_kl([0.6, 0.6], [[0.5, 0.5], [0.5, 0.5]], [[0.5, 0.5], [0.5, 0.5]])


@given(st.integers(0, 10_000))
def test_kl_nonnegative(seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(3))
    assert discrete_kl(p, stochastic(rng), stochastic(rng)) >= 0.0


@given(st.integers(0, 10_000))
def test_composition_never_increases_kl(seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(3))
    h1, h2, g1, g2 = (stochastic(rng) for _ in range(4))
    two_step = discrete_kl(p, h1, g1) + discrete_kl(p @ h1, h2, g2)
    assert discrete_kl(p, compose(h1, h2), compose(g1, g2)) <= two_step + 1e-12


def test_transfer_expected_outcome_costs_nothing():
    a = np.array([500.0, 300.0, 200.0])
    res = optimal_transfer(CellSystem(a, a @ G3, G3))
    assert np.allclose(res.h_star, G3, atol=1e-12)
    assert res.kl_star < 1e-15 and abs(res.log_prob_rate) < 1e-12


def test_transfer_ln2_case():
    N = 1000.0
    g = np.full((2, 2), 0.5)
    res = optimal_transfer(CellSystem([N, 0.0], [0.0, N], g))
    # the only feasible first row is (0, 1); the second row is unconstrained and kept at g
    assert np.allclose(res.h_star[0], [0.0, 1.0], atol=1e-12)
    assert res.kl_star == pytest.approx(math.log(2), abs=1e-12)
    assert res.log_prob_rate == pytest.approx(-N * math.log(2), rel=1e-12)


def test_transfer_matches_brute_force_on_two_cells():
    a, b = np.array([600.0, 400.0]), np.array([450.0, 550.0])
    g = np.array([[0.7, 0.3], [0.4, 0.6]])
    res = optimal_transfer(CellSystem(a, b, g))
    p = a / a.sum()
    # feasible h: first row (x, 1-x); second row fixed by the column-0 marginal
    xs = np.linspace(0, 1, 200_001)[1:-1]
    y = (b[0] / a.sum() - p[0] * xs) / p[1]
    ok = (y > 0) & (y < 1)
    vals = [discrete_kl(p, [[x, 1 - x], [yy, 1 - yy]], g) for x, yy in zip(xs[ok], y[ok])]
    assert res.kl_star <= min(vals) + 1e-12
    assert res.kl_star == pytest.approx(min(vals), abs=1e-8)


def test_transfer_marginals_and_history():
    a = np.array([700.0, 200.0, 100.0])
    b = np.array([350.0, 350.0, 300.0])
    res = optimal_transfer(CellSystem(a, b, G3))
    assert res.converged and res.marginal_residual < 1e-13
    assert np.allclose(a @ res.h_star, b, rtol=1e-12)
    hist = np.array(res.residual_history)
    assert np.all(np.diff(hist) <= 1e-15)


@given(st.permutations([0, 1, 2]))
def test_transfer_permutation_invariance(perm):
    a = np.array([700.0, 200.0, 100.0])
    b = np.array([350.0, 350.0, 300.0])
    base = optimal_transfer(CellSystem(a, b, G3))
    p = list(perm)
    moved = optimal_transfer(CellSystem(a[p], b[p], G3[np.ix_(p, p)]))
    assert moved.kl_star == pytest.approx(base.kl_star, abs=1e-12)
    assert np.allclose(moved.h_star, base.h_star[np.ix_(p, p)], atol=1e-10)


def test_transfer_errors_and_stirling_warning():
    with pytest.raises(DivergenceError):
        CellSystem([1.0, 2.0], [1.0, 1.0], np.full((2, 2), 0.5))
    with pytest.raises(DivergenceError):
        optimal_transfer(CellSystem([1.0, 1.0], [1.0, 1.0], [[1.0, 0.0], [0.5, 0.5]]))
    with pytest.warns(RuntimeWarning, match="small"):
        optimal_transfer(CellSystem([10.0, 10.0], [12.0, 8.0], np.full((2, 2), 0.5)))


def test_transfer_report_files(tmp_path):
    res = optimal_transfer(CellSystem([700.0, 300.0], [400.0, 600.0], [[0.7, 0.3], [0.4, 0.6]]))
    res.write(tmp_path / "h.csv", tmp_path / "r.json")
    back = np.loadtxt(tmp_path / "h.csv", delimiter=",")
    assert np.array_equal(back, res.h_star)
    assert '"kl_star"' in (tmp_path / "r.json").read_text()


def test_exact_tail_by_enumeration():
    a = np.array([3, 2, 1])
    count = 3
    # every particle picks a destination independently
    sources = np.repeat(np.arange(3), a)
    total = 0.0
    for dest in itertools.product(range(3), repeat=sources.size):
        prob = math.prod(G3[l, k] for l, k in zip(sources, dest))
        if sum(k == 0 for k in dest) >= count:
            total += prob
    assert exact_tail_probability(a, G3, count) == pytest.approx(total, rel=1e-12)


def test_tilted_outcome_below_mean_is_free():
    b, rate = tilted_outcome([100, 100, 100], G3, 0.2)
    assert rate == 0.0 and np.allclose(b, np.array([100, 100, 100]) @ G3)


def test_tilted_outcome_matches_sinkhorn():
    a = np.array([400.0, 300.0, 300.0])
    b, rate = tilted_outcome(a, G3, 0.34)
    assert b[0] == pytest.approx(340.0, rel=1e-12)
    assert optimal_transfer(CellSystem(a, b, G3)).kl_star == pytest.approx(rate, rel=1e-10)


def test_ink_experiment_is_seeded():
    kw = dict(a_frac=[0.4, 0.3, 0.3], g=G3, threshold=0.36, N=400, trials=20_000, batch=5000)
    r1 = ink_experiment(seed=3, **kw)
    r2 = ink_experiment(seed=3, **kw)
    assert r1.hits == r2.hits and r1.hits > 0
    se = math.sqrt(r1.exact_probability / r1.trials)
    assert abs(r1.frequency - r1.exact_probability) < 4 * se


def test_pathwise_closed_identical_and_constant_drift():
    g = make_time_grid(0, 2, 40)
    sp = SpatialGrid(-8, 8, 401)
    P = solve_fokker_planck(ProcessSpec(lambda x, t: 0.7 + 0 * x, lambda t: 1.5), gaussian_on_grid(sp, -2, 0.5), sp, g, check_mass=False)
    same = ProcessSpec(lambda x, t: 0.7 + 0 * x, lambda t: 1.5)
    zero = ProcessSpec(lambda x, t: 0 * x, lambda t: 1.5)
    assert pathwise_kl_closed(same, same, P, g) == 0.0
    # u^2 T / 2D over the first n steps (left-point sum) times the density mass
    mass = P.mass()[:-1]
    expected = float(np.sum(g.steps * mass)) * 0.49 / 3.0
    assert pathwise_kl_closed(same, zero, P, g) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(0.49 * 2 / 3.0, rel=1e-6)


def test_pathwise_closed_with_killing():
    g = make_time_grid(0, 1, 10)
    x = np.linspace(-10, 10, 2001)
    path = evolve_mixture(GaussianMixture([1.0], [0.0], [1.0]), ou_schedule(2.0, 2.0, g), g)
    spec = ProcessSpec(lambda y, t: -y, lambda t: 2.0)
    killed = ProcessSpec(lambda y, t: -y, lambda t: 2.0, killing=lambda y, t: y[:, 0] ** 2)
    # stationary N(0, 1): E[x^2] = 1 at every node
    assert pathwise_kl_closed(spec, killed, path, g, x) == pytest.approx(1.0, rel=1e-8)


def test_pathwise_mismatched_diffusion():
    g = make_time_grid(0, 1, 4)
    with pytest.raises(DivergenceError):
        pathwise_kl_monte_carlo(ProcessSpec(lambda x, t: x, lambda t: 1.0), ProcessSpec(lambda x, t: x, lambda t: 2.0), 0.0, g, 10, 0)
    with pytest.raises(DivergenceError):
        pathwise_kl_monte_carlo(ProcessSpec(lambda x, t: x, lambda t: 1.0), ProcessSpec(lambda x, t: x, lambda t: 1.0), 0.0, g, 0, 0)


def test_pathwise_monte_carlo_identical_and_constant_drift():
    g = make_time_grid(0, 2, 40)
    same = ProcessSpec(lambda x, t: 0.7 + 0 * x, lambda t: 1.5)
    zero = ProcessSpec(lambda x, t: 0 * x, lambda t: 1.5)
    est, se = pathwise_kl_monte_carlo(same, same, 0.0, g, 1000, 1)
    assert est == 0.0
    est, se = pathwise_kl_monte_carlo(same, zero, 0.0, g, 100_000, 2)
    assert abs(est - 0.49 * 2 / 3.0) < 3 * se


def test_pathwise_ou_pair_closed_vs_monte_carlo():
    g = make_time_grid(0, 1, 200)
    H = ou_schedule(1.0, 1.0, g)
    spec_H = ou_process(H)
    spec_G = ou_process(ou_schedule(2.0, 1.0, g))
    start = GaussianMixture([1.0], [0.5], [0.3])
    path = evolve_mixture(start, H, g)
    closed = pathwise_kl_closed(spec_H, spec_G, path, g, np.linspace(-8, 8, 1601))
    est, se = pathwise_kl_monte_carlo(spec_H, spec_G, lambda n, r: start.sample(n, r), g, 200_000, 5)
    assert abs(est - closed) < 3 * se
