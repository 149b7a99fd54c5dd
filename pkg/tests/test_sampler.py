import csv
import json

import numpy as np
import pytest
from scipy.stats import ks_2samp

from actiondiff.exact_mixture import GaussianMixture, evolve_mixture
from actiondiff.sampler import (
    SamplingError,
    exact_score_fn,
    reverse_process_spec,
    sample_reverse,
    tractable_initial,
)
from actiondiff.schedule import make_time_grid, ou_schedule, pure_diffusion_schedule
from actiondiff.sde_sim import ou_process, pure_diffusion_process


def gaussian_reverse(n, n_samples, seed=0):
    # data N(0, 1) under pure diffusion D = 1 for unit time
    grid = make_time_grid(0, 1, n)
    sched = pure_diffusion_schedule(1.0, grid)
    score = lambda x, t: -x / (1 + t)
    return sample_reverse(score, pure_diffusion_process(1.0), sched, grid, n_samples, seed,
                          init=tractable_initial(sched, var0=1.0), t_min=0.0)


def variance_recursion(n):
    dt, v = 1 / n, 2.0
    for k in range(n, 0, -1):
        v = v * (1 - dt / (1 + k * dt)) ** 2 + dt
    return v


def test_no_steps_returns_initial_states():
    grid = make_time_grid(0, 1, 10)
    sched = ou_schedule(1.0, 1.0, grid)
    x0 = np.linspace(-1, 1, 7)[:, None]
    run = sample_reverse(lambda x, t: 0 * x, ou_process(sched), sched, grid, 7, 3, init=x0, t_min=1.0)
    assert np.array_equal(run.samples, x0) and run.t_stop == 1.0


def test_gaussian_reversal_matches_step_recursion():
    n_samples = 400_000
    errs = []
    for n in (4, 8):
        run = gaussian_reverse(n, n_samples)
        v = run.samples[:, 0].var()
        se = v * np.sqrt(2 / n_samples)
        assert abs(v - variance_recursion(n)) < 4 * se
        assert abs(run.samples.mean()) < 4 * np.sqrt(v / n_samples)
        errs.append(v - 1)
    assert 1.6 < errs[0] / errs[1] < 2.5


def test_gaussian_reversal_converges():
    run = gaussian_reverse(200, 100_000, seed=4)
    assert run.samples.var() == pytest.approx(1.0, rel=0.02) and run.t_stop == 0.0


@pytest.fixture(scope="module")
def exact_two_bump_run():
    mix = GaussianMixture(np.array([0.5, 0.5]), np.array([[-1.0], [1.0]]), np.array([[0.04], [0.04]]))
    grid = make_time_grid(0, 5, 500, spacing="geometric", ratio=30.0)
    sched = ou_schedule(1.0, 1.0, grid)
    path = evolve_mixture(mix, sched, grid, kind="ou")
    run = sample_reverse(exact_score_fn(path), ou_process(sched), sched, grid, 100_000, 9,
                         init=tractable_initial(sched), t_min=0.0, snapshot_nodes=(250, 500), source="exact")
    return mix, grid, path, run


def test_exact_score_sampling_recovers_data(exact_two_bump_run):
    mix, _, _, run = exact_two_bump_run
    x = run.samples[:, 0]
    assert abs(x.mean()) < 0.02
    assert x.var() == pytest.approx(1.04, rel=0.03)
    ref = mix.sample(20_000, np.random.default_rng(1))[:, 0]
    assert ks_2samp(x[:20_000], ref).pvalue > 0.01


def test_snapshot_matches_exact_marginal(exact_two_bump_run):
    _, grid, path, run = exact_two_bump_run
    assert set(run.snapshots) == {250, 500}
    states = run.snapshots[250][:, 0]
    hist, edges = np.histogram(states, bins=100, range=(-4, 4), density=True)
    mid = 0.5 * (edges[1:] + edges[:-1])
    exact = path.at(float(grid.nodes[250])).pdf(mid[:, None])
    l1 = np.sum(np.abs(hist - exact)) * (edges[1] - edges[0])
    assert l1 < 0.03


def test_seed_determinism_and_workers():
    grid = make_time_grid(0, 2, 40)
    sched = ou_schedule(1.0, 1.0, grid)
    score = lambda x, t: -x
    a = sample_reverse(score, ou_process(sched), sched, grid, 1000, 5)
    b = sample_reverse(score, ou_process(sched), sched, grid, 1000, 5, n_workers=3)
    c = sample_reverse(score, ou_process(sched), sched, grid, 1000, 6)
    assert np.array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, c.samples)


def test_default_stop_avoids_zero_noise():
    grid = make_time_grid(0, 1, 100)
    sched = ou_schedule(1.0, 1.0, grid)
    seen = []
    sample_reverse(lambda x, t: seen.append(t) or 0 * x, ou_process(sched), sched, grid, 5, 0)
    assert min(seen) > 1e-3


def test_bound_and_finiteness_violations():
    grid = make_time_grid(0, 1, 10)
    sched = ou_schedule(1.0, 1.0, grid)
    with pytest.raises(SamplingError, match="bound"):
        sample_reverse(lambda x, t: 1e4 + 0 * x, ou_process(sched), sched, grid, 10, 0, bound=100.0)
    with pytest.raises(SamplingError, match="non-finite"):
        sample_reverse(lambda x, t: np.nan * x, ou_process(sched), sched, grid, 10, 0)
    with pytest.raises(SamplingError):
        sample_reverse(lambda x, t: x, ou_process(sched), sched, grid, 0, 0)
    with pytest.raises(SamplingError):
        sample_reverse(lambda x, t: x, ou_process(sched), sched, grid, 3, 0, init=np.zeros((3, 2)))


def test_tractable_initial_variants():
    grid = make_time_grid(0, 2, 20)
    rng = np.random.default_rng(0)
    ou = tractable_initial(ou_schedule(1.0, 3.0, grid))(200_000, rng)
    assert ou.var() == pytest.approx(3.0, rel=0.02)
    pd = tractable_initial(pure_diffusion_schedule(0.5, grid), var0=1.0, mean0=2.0)(200_000, rng)
    assert pd.mean() == pytest.approx(2.0, abs=0.02) and pd.var() == pytest.approx(2.0, rel=0.02)
    with pytest.raises(SamplingError):
        tractable_initial(pure_diffusion_schedule(0.5, grid))


def test_reverse_process_spec_relabels_time():
    sched = ou_schedule(1.0, 1.0, make_time_grid(0, 2, 20))
    fwd = ou_process(sched)
    rev = reverse_process_spec(fwd, lambda x, t: -x / (1 + t), 0.0, 2.0)
    x = np.array([[0.5]])
    assert np.allclose(rev.drift(x, 0.5), 0.5 * x - x / 2.5, rtol=1e-14)
    assert rev.D(0.5) == fwd.D(1.5)


def test_outputs_written(tmp_path):
    grid = make_time_grid(0, 1, 10)
    sched = ou_schedule(1.0, 1.0, grid)
    run = sample_reverse(lambda x, t: -x, ou_process(sched), sched, grid, 4, 1, snapshot_nodes=(5,))
    run.write_csv(tmp_path / "s.csv")
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == ["x_0"] and np.allclose([float(r[0]) for r in rows[1:]], run.samples[:, 0], rtol=0, atol=0)
    paths = run.write_snapshots(str(tmp_path / "snap"))
    assert len(paths) == 1 and paths[0].endswith("node00005.csv")
    run.write_summary(tmp_path / "sum.json")
    s = json.loads((tmp_path / "sum.json").read_text())
    assert s["n_samples"] == 4 and s["seed"] == 1
