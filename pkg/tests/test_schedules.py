import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpsfk.priors import four_mode_prior, noised_mixture
from dpsfk.schedules import (
    ZETA_FLOOR,
    AnnealingSchedule,
    DdpmSchedule,
    ScheduleError,
    TimeGrid,
    beta_to_dt,
    build_time_grid,
    deta_dt,
    dt_closed_form,
    eta,
    invert_time,
    closed_form_index,
    zeta,
)

# frozen from direct evaluation of -0.5 log(1 - beta) on the linear schedule
T_N_GOLDEN = 5.063865608605715
DT_1_GOLDEN = 5.9953594289806446e-05
DT_BETA_002 = 0.010101353658759724
DETA_T1_GOLDEN = -1.5e7 / 90601


def test_beta_to_dt_goldens():
    assert beta_to_dt(0.0) == 0.0
    assert beta_to_dt(0.02) == DT_BETA_002
    assert f"{beta_to_dt(0.02):.6g}" == "0.0101014"
    assert beta_to_dt(1.2e-4) == pytest.approx(6.0004e-5, rel=1e-4)
    with pytest.raises(ScheduleError, match="degenerate step"):
        beta_to_dt(1.0)


@given(a=st.floats(0, 0.99), b=st.floats(0, 0.99))
@settings(max_examples=60, deadline=None)
def test_beta_to_dt_monotone(a, b):
    if a < b:
        assert beta_to_dt(a) < beta_to_dt(b)


def test_linear_schedule_indexing():
    s = DdpmSchedule()
    assert s.betas[0] == pytest.approx(1e-4 + 1.99e-5)
    assert s.betas[-1] == pytest.approx(0.02)
    g = build_time_grid(s)
    assert g.dt[0] == DT_1_GOLDEN
    assert g.T == T_N_GOLDEN


def test_grid_monotone_and_alpha_bar(ddpm_grid):
    assert np.all(np.diff(ddpm_grid.times) > 0)
    np.testing.assert_allclose(ddpm_grid.alpha_bar[1:], np.cumprod(1 - ddpm_grid.betas), rtol=1e-10)


def test_grid_semigroup_matches_noised_mixture(ddpm_grid):
    p = four_mode_prior()
    q = p
    for dt in ddpm_grid.dt[:200]:
        q = noised_mixture(q, dt)
    r = noised_mixture(p, ddpm_grid.times[200])
    np.testing.assert_allclose(q.means, r.means, atol=1e-12)
    np.testing.assert_allclose(q.covs, r.covs, atol=1e-12)


def test_invert_time_round_trip(ddpm_grid):
    idx = invert_time(ddpm_grid, ddpm_grid.times)
    assert np.max(np.abs(idx - np.arange(ddpm_grid.N + 1))) <= 0.51
    assert invert_time(ddpm_grid, 0.0) == 0.0
    with pytest.raises(ScheduleError, match="time out of range"):
        invert_time(ddpm_grid, ddpm_grid.T + 1.0)


def test_closed_form_index_origin():
    assert closed_form_index(0.0) == 0.0


def test_closed_form_index_is_quarter_step_inverse():
    # the closed form inverts the quarter-step approximation dt ~ beta / 4
    s = DdpmSchedule()
    tq = np.cumsum(s.betas / 4)
    i = np.arange(1, s.N + 1)
    rel = np.abs(closed_form_index(tq) - i) / i
    assert rel[9:].max() <= 0.01


def test_dt_closed_form_values():
    assert dt_closed_form(0.0) == 3e-5
    assert dt_closed_form(1.0) == pytest.approx(3.03e-3, rel=1e-12)


def test_eta_modes():
    pc = AnnealingSchedule(mode="closed_form")
    assert eta(pc, 0.0) == 1e5
    assert f"{eta(pc, 1.0):.4g}" == "332.2"
    assert deta_dt(pc, 1.0) == pytest.approx(DETA_T1_GOLDEN, rel=1e-14)


def test_exact_eta_times_dt_is_one(ddpm_grid):
    ex = AnnealingSchedule(mode="exact_inverse_dt", grid=ddpm_grid)
    np.testing.assert_allclose(eta(ex, ddpm_grid.times[1:]) * ddpm_grid.dt, 1.0, rtol=1e-12)


def test_exact_eta_derivative_fd(ddpm_grid):
    ex = AnnealingSchedule(mode="exact_inverse_dt", grid=ddpm_grid)
    t = np.linspace(0.3, 4.5, 20)
    h = 1e-6
    fd = (eta(ex, t + h) - eta(ex, t - h)) / (2 * h)
    np.testing.assert_allclose(deta_dt(ex, t), fd, rtol=1e-4)


def test_closed_form_derivative_fd():
    pc = AnnealingSchedule(mode="closed_form")
    t = np.linspace(0.1, 3.0, 15)
    h = 1e-6
    np.testing.assert_allclose(deta_dt(pc, t), (eta(pc, t + h) - eta(pc, t - h)) / (2 * h), rtol=1e-6)


def test_constant_annealing():
    c = AnnealingSchedule(mode="constant", eta0=2.5)
    assert eta(c, 0.7) == 2.5 and deta_dt(c, 0.7) == 0.0


def test_annealing_validation():
    with pytest.raises(ScheduleError):
        AnnealingSchedule(alpha=0.0)
    with pytest.raises(ScheduleError):
        AnnealingSchedule(mode="exact_inverse_dt")
    with pytest.raises(ScheduleError):
        AnnealingSchedule(mode="bogus")


def test_zeta():
    assert zeta(0.5, 1.0) == (0.5, False)
    v, f = zeta(0.5, 1e300)
    assert v < 1e-299 and not f
    v, f = zeta(0.5, 1e-12)
    assert v == 0.5 / ZETA_FLOOR and f
    with pytest.raises(ScheduleError):
        zeta(0.5, -1.0)


def test_time_grid_validation():
    with pytest.raises(ScheduleError):
        TimeGrid([0.0, 0.5, 0.5])
    with pytest.raises(ScheduleError):
        TimeGrid([0.1, 0.5])
    g = TimeGrid.uniform(1.0, 10).restrict(2, 6)
    np.testing.assert_allclose(g.times, np.linspace(0, 0.4, 5), atol=1e-15)
