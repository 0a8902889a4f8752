import numpy as np
import pytest
from scipy import stats

from dpsfk.diagnostics import grid_posterior, histogram, tv_distance
from dpsfk.priors import GaussianMixturePrior, posterior_oracle
from dpsfk.rewards import RewardSpec
from dpsfk.schedules import DdpmSchedule, TimeGrid, build_time_grid
from dpsfk.sde import (
    SamplerConfig,
    StslPotential,
    ZetaMode,
    dps_step,
    reverse_step,
    run_sampler,
    simulate_forward,
    stsl_drift,
)

EDGES_1D = [np.linspace(-5, 5, 101)]


@pytest.fixture(scope="module")
def short_grid():
    return build_time_grid(DdpmSchedule(beta_min=1e-3, beta_max=0.1, N=200))


def test_forward_standard_normal_is_stationary(short_grid):
    p = GaussianMixturePrior.standard_normal(2)
    ens = simulate_forward(p, short_grid, n_paths=20000, seed=3)
    for k in range(2):
        assert stats.kstest(ens.terminal[:, k], "norm").pvalue > 1e-3


def test_forward_mixes_to_standard_normal(gmm1d, ddpm_grid):
    ens = simulate_forward(gmm1d, ddpm_grid, n_paths=20000, seed=4)
    assert stats.kstest(ens.terminal[:, 0], "norm").pvalue > 1e-3


def test_forward_from_points_is_gaussian(gmm1d, short_grid):
    x0 = np.full((20000, 1), 2.0)
    ens = simulate_forward(gmm1d, short_grid.restrict(0, 50), x0=x0, seed=5)
    t = short_grid.times[50]
    m, s = 2.0 * np.exp(-t), np.sqrt(-np.expm1(-2 * t))
    assert stats.kstest(ens.terminal[:, 0], "norm", args=(m, s)).pvalue > 1e-3


def test_unguided_reverse_recovers_prior_1d(gmm1d, ddpm_grid):
    ens = run_sampler(SamplerConfig(ddpm_grid, n_paths=20000, seed=0), gmm1d)
    oracle = grid_posterior(gmm1d, None, [(-5, 5)], 100, check=False)
    assert tv_distance(histogram(ens.terminal, EDGES_1D), oracle) <= 0.03


def test_reverse_standard_normal_moments(short_grid):
    p = GaussianMixturePrior.standard_normal(2)
    ens = run_sampler(SamplerConfig(short_grid, n_paths=20000, seed=1), p)
    x = ens.terminal
    se = 4 / np.sqrt(x.shape[0])
    np.testing.assert_allclose(x.mean(axis=0), 0.0, atol=se)
    np.testing.assert_allclose(np.cov(x.T), np.eye(2), atol=6 * se)


def test_em_and_ddpm_agree_in_law(gmm1d, ddpm_grid):
    a = run_sampler(SamplerConfig(ddpm_grid, n_paths=8000, seed=2), gmm1d).terminal[:, 0]
    b = run_sampler(SamplerConfig(ddpm_grid, n_paths=8000, seed=3, integrator="em"), gmm1d).terminal[:, 0]
    assert stats.ks_2samp(a, b).pvalue > 1e-3


def test_zero_zeta_equals_unguided(gmm1d, reward1d, short_grid):
    base = run_sampler(SamplerConfig(short_grid, n_paths=50, seed=7), gmm1d)
    z0 = run_sampler(SamplerConfig(short_grid, guidance="dps_discrete", zeta=ZetaMode.constant(0.0), n_paths=50,
                                   seed=7), gmm1d, reward1d)
    np.testing.assert_array_equal(base.terminal, z0.terminal)


def test_i_stop_at_N_is_unguided(gmm1d, reward1d, short_grid):
    base = run_sampler(SamplerConfig(short_grid, n_paths=50, seed=8), gmm1d)
    off = run_sampler(SamplerConfig(short_grid, guidance="dps_continuous", i_stop=short_grid.N, n_paths=50, seed=8),
                      gmm1d, reward1d)
    np.testing.assert_array_equal(base.terminal, off.terminal)


def test_standard_normal_linear_reward_is_exact(ddpm_grid):
    # N(0, I) tilted by exp(b.x) is N(b, I), and the guidance is the exact h-transform drift
    p = GaussianMixturePrior.standard_normal(2)
    b = np.array([0.8, -0.5])
    r = RewardSpec.linear(b)
    ens = run_sampler(SamplerConfig(ddpm_grid, guidance="dps_continuous", n_paths=20000, seed=9), p, r)
    m = posterior_oracle(p, r).means[0]
    se = 4 / np.sqrt(20000)
    np.testing.assert_allclose(ens.terminal.mean(axis=0), m, atol=se + 0.01)
    np.testing.assert_allclose(np.cov(ens.terminal.T), np.eye(2), atol=0.04)


def test_determinism_and_path_independence(gmm1d, reward1d, short_grid):
    cfg = SamplerConfig(short_grid, guidance="dps_continuous", n_paths=40, seed=11, block_size=16)
    a = run_sampler(cfg, gmm1d, reward1d)
    b = run_sampler(cfg, gmm1d, reward1d)
    np.testing.assert_array_equal(a.terminal, b.terminal)
    c = run_sampler(SamplerConfig(short_grid, guidance="dps_continuous", n_paths=20, seed=11, block_size=16),
                    gmm1d, reward1d)
    np.testing.assert_array_equal(a.terminal[:20], c.terminal)
    d = run_sampler(SamplerConfig(short_grid, guidance="dps_continuous", n_paths=40, seed=12, block_size=16),
                    gmm1d, reward1d)
    assert not np.array_equal(a.terminal, d.terminal)


def test_drift_records_reconstruct_increments(gmm2d, reward2d, short_grid):
    cfg = SamplerConfig(short_grid, guidance="stsl", stsl_strength=0.3, n_paths=30, seed=2, record="full")
    ens = run_sampler(cfg, gmm2d, reward2d)
    inc = np.diff(ens.states, axis=1)
    parts = sum(ens.records[k] for k in ("score_drift", "guidance_drift", "stsl_drift", "noise_draw"))
    np.testing.assert_allclose(inc, parts, atol=1e-12)
    assert ens.states.shape == (30, short_grid.N + 1, 2)
    np.testing.assert_array_equal(ens.states[:, 0], ens.initial)
    np.testing.assert_array_equal(ens.states[:, -1], ens.terminal)


def test_divergence_is_marked(gmm1d, short_grid):
    r = RewardSpec.quadratic(np.array([[1.0]]), np.array([0.5]), 1.0)
    cfg = SamplerConfig(short_grid, guidance="dps_discrete", zeta=ZetaMode.constant(50.0), n_paths=20, seed=0,
                        record="states")
    ens = run_sampler(cfg, gmm1d, r)
    assert ens.diverged.all()
    for j in range(ens.n_paths):
        s = ens.diverged_step[j]
        assert s >= 1
        assert np.all(np.isfinite(ens.states[j, :s]))
        assert np.all(np.isnan(ens.states[j, s:]))
    assert ens.summary()["divergence_fraction"] == 1.0


def test_stsl_drift_points_down_the_potential(gmm2d):
    x = np.random.default_rng(0).normal(0, 2, (20, 2))
    t = 0.5
    pot = StslPotential()
    d = stsl_drift(gmm2d, t, x, 1.0, pot)
    np.testing.assert_allclose(d, -pot.grad(gmm2d, t, x))
    # a small step along the drift lowers tr Sigma
    step = 1e-4 * d
    assert np.all(pot.value(gmm2d, t, x + step) <= pot.value(gmm2d, t, x) + 1e-12)
    assert np.all(stsl_drift(gmm2d, t, x, 0.0) == 0)


def test_stsl_drift_zero_for_gaussian():
    p = GaussianMixturePrior.standard_normal(2)
    x = np.random.default_rng(1).normal(size=(10, 2))
    np.testing.assert_allclose(stsl_drift(p, 0.7, x, 2.0), 0.0, atol=1e-6)


def test_single_steps_validate_and_match_sampler(gmm1d, reward1d, short_grid):
    with pytest.raises(ValueError):
        reverse_step(gmm1d, [0.0], 0, short_grid)
    x = np.zeros((3, 1))
    y = reverse_step(gmm1d, x, 5, short_grid, rng=np.random.default_rng(0))
    assert y.shape == (3, 1) and np.all(np.isfinite(y))
    z = dps_step(gmm1d, reward1d, x, 5, short_grid, rng=np.random.default_rng(0), variance="posterior")
    assert z.shape == (3, 1)
    with pytest.raises(ValueError):
        stsl_drift(gmm1d, 0.0, x, 1.0)


def test_config_validation(short_grid):
    with pytest.raises(ValueError):
        SamplerConfig(short_grid, guidance="bogus")
    with pytest.raises(ValueError):
        SamplerConfig(short_grid, i_stop=short_grid.N + 1)
    with pytest.raises(ValueError):
        run_sampler(SamplerConfig(short_grid, guidance="dps_continuous", n_paths=2), GaussianMixturePrior.standard_normal(1))
    with pytest.raises(ValueError):
        ZetaMode("nope")
    assert TimeGrid.uniform(1.0, 4).N == 4
