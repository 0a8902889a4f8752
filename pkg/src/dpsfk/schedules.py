"""DDPM variance schedules, OU time grids, annealing and guidance weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import PchipInterpolator

__all__ = [
    "DdpmSchedule",
    "TimeGrid",
    "AnnealingSchedule",
    "ScheduleError",
    "beta_to_dt",
    "build_time_grid",
    "invert_time",
    "closed_form_index",
    "dt_closed_form",
    "eta",
    "deta_dt",
    "zeta",
]

ZETA_FLOOR = 1e-8


class ScheduleError(ValueError):
    pass


def beta_to_dt(beta):
    """OU step matching a DDPM variance: ``-0.5 * log(1 - beta)``."""
    beta = np.asarray(beta, dtype=float)
    if np.any(beta >= 1):
        raise ScheduleError("degenerate step")
    if np.any(beta < 0):
        raise ScheduleError("beta must be nonnegative")
    out = -0.5 * np.log1p(-beta)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class DdpmSchedule:
    """Linear schedule ``beta_i = beta_min + i (beta_max - beta_min) / N``, ``i = 1..N``."""

    beta_min: float = 1e-4
    beta_max: float = 0.02
    N: int = 1000

    def __post_init__(self):
        if not (0 < self.beta_min <= self.beta_max < 1):
            raise ScheduleError("need 0 < beta_min <= beta_max < 1")
        if self.N < 1:
            raise ScheduleError("need N >= 1")

    def beta(self, i):
        return self.beta_min + np.asarray(i, dtype=float) * (self.beta_max - self.beta_min) / self.N

    @property
    def betas(self) -> np.ndarray:
        return self.beta(np.arange(1, self.N + 1))


@dataclass(frozen=True)
class TimeGrid:
    """OU times ``0 = t_0 < t_1 < ... < t_N``.

    Index ``i`` is the DDPM step index, so step ``i`` spans ``[t_{i-1}, t_i]``.
    """

    times: np.ndarray
    schedule: DdpmSchedule | None = None

    def __post_init__(self):
        t = np.array(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise ScheduleError("grid needs at least two times")
        if t[0] != 0.0:
            raise ScheduleError("grid must start at t = 0")
        if np.any(np.diff(t) <= 0):
            raise ScheduleError("grid times must be strictly increasing")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)

    @classmethod
    def uniform(cls, T: float, N: int) -> "TimeGrid":
        return cls(np.linspace(0.0, T, N + 1))

    @property
    def N(self) -> int:
        return self.times.size - 1

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def dt(self) -> np.ndarray:
        """``dt[i-1] = t_i - t_{i-1}`` for ``i = 1..N``."""
        return np.diff(self.times)

    @property
    def betas(self) -> np.ndarray:
        """DDPM variances equivalent to each step: ``1 - e^{-2 dt}``."""
        if self.schedule is not None:
            return self.schedule.betas
        return -np.expm1(-2.0 * self.dt)

    @property
    def alpha_bar(self) -> np.ndarray:
        """``prod_{j<=i} (1 - beta_j) = e^{-2 t_i}`` for ``i = 0..N``."""
        return np.exp(-2.0 * self.times)

    def restrict(self, i_lo: int, i_hi: int) -> "TimeGrid":
        """Sub-grid over ``[t_{i_lo}, t_{i_hi}]`` shifted to start at zero."""
        return TimeGrid(self.times[i_lo : i_hi + 1] - self.times[i_lo])


def build_time_grid(sched: DdpmSchedule) -> TimeGrid:
    dt = beta_to_dt(sched.betas)
    # cumsum keeps t_i = sum_{j<=i} dt_j exactly as accumulated
    return TimeGrid(np.concatenate([[0.0], np.cumsum(dt)]), schedule=sched)


def closed_form_index(t):
    """Closed-form index map ``i(t) = (sqrt(121 + 16e5 t) - 11) / 2``.

    Derived under the quarter-step approximation ``dt ~ beta / 4``.
    """
    t = np.asarray(t, dtype=float)
    out = (np.sqrt(121.0 + 16e5 * t) - 11.0) / 2.0
    return float(out) if out.ndim == 0 else out


def invert_time(grid: TimeGrid, t):
    """Fractional step index of OU time ``t`` (piecewise linear between grid times)."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > grid.T * (1 + 1e-12)):
        raise ScheduleError("time out of range")
    out = np.interp(t, grid.times, np.arange(grid.N + 1, dtype=float))
    return float(out) if out.ndim == 0 else out


def dt_closed_form(t):
    """Compact step-size approximation ``3e-5 + 3e-3 sqrt(t)``."""
    t = np.asarray(t, dtype=float)
    out = 3e-5 + 3e-3 * np.sqrt(t)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class AnnealingSchedule:
    """Guidance amplification ``eta_t``.

    Modes: ``exact_inverse_dt`` (``1 / dt(t)`` on ``grid``), ``closed_form``
    (``1e5 / (1 + 300 sqrt t)``) and ``constant`` (``eta0``).
    """

    alpha: float = 1.0
    mode: str = "exact_inverse_dt"
    grid: TimeGrid | None = None
    eta0: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ScheduleError("alpha must be positive")
        if self.mode not in ("exact_inverse_dt", "closed_form", "constant"):
            raise ScheduleError(f"unknown annealing mode {self.mode!r}")
        if self.mode == "exact_inverse_dt":
            if self.grid is None:
                raise ScheduleError("exact_inverse_dt needs a grid")
            interp = PchipInterpolator(self.grid.times[1:], self.grid.dt, extrapolate=True)
            object.__setattr__(self, "_dt", interp)

    def step(self, t):
        """Step size ``dt(t)`` implied by the exact grid (exact at grid times)."""
        t = np.clip(np.asarray(t, dtype=float), self.grid.times[1], self.grid.T)
        return self._dt(t)


def eta(sched: AnnealingSchedule, t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ScheduleError("time must be nonnegative")
    if sched.mode == "constant":
        out = np.full_like(t, sched.eta0)
    elif sched.mode == "closed_form":
        out = 1e5 / (1.0 + 300.0 * np.sqrt(t))
    else:
        out = 1.0 / sched.step(t)
    return float(out) if out.ndim == 0 else out


def deta_dt(sched: AnnealingSchedule, t):
    """Time derivative of ``eta``; analytic for the closed form, spline-exact otherwise."""
    t = np.asarray(t, dtype=float)
    if sched.mode == "constant":
        out = np.zeros_like(t)
    elif sched.mode == "closed_form":
        rt = np.sqrt(t)
        out = -1e5 * 150.0 / (rt * (1.0 + 300.0 * rt) ** 2)
    else:
        tc = np.clip(t, sched.grid.times[1], sched.grid.T)
        inside = (t >= sched.grid.times[1]) & (t <= sched.grid.T)
        out = np.where(inside, -sched._dt(tc, 1) / sched._dt(tc) ** 2, 0.0)
    return float(out) if out.ndim == 0 else out


def zeta(alpha: float, residual_norm, floor: float = ZETA_FLOOR):
    """Trajectory-dependent weight ``alpha / |y - A x|`` with a residual floor.

    Returns ``(zeta, near_constraint)``; the flag marks floored residuals.
    """
    r = np.asarray(residual_norm, dtype=float)
    if np.any(r < 0):
        raise ScheduleError("residual norm must be nonnegative")
    flag = r < floor
    with np.errstate(divide="ignore"):
        out = alpha / np.maximum(r, floor)
    if out.ndim == 0:
        return float(out), bool(flag)
    return out, flag
