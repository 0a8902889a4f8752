"""Forward OU simulation and guided reverse samplers.

Samplers run on a :class:`~dpsfk.schedules.TimeGrid` from step ``N`` down to
step ``1``.  Paths are processed in fixed-size blocks; block ``b`` draws all
of its randomness from ``SeedSequence([seed, b])`` and always draws a full
block, so path ``j`` is a function of ``(seed, j)`` alone.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .priors import TweedieEval, tweedie
from .rewards import RewardSpec, guidance_from_tweedie, nonsmooth_mask, reward_grad
from .schedules import ZETA_FLOOR, TimeGrid, zeta

log = logging.getLogger(__name__)

__all__ = [
    "ZetaMode",
    "SamplerConfig",
    "StslPotential",
    "Trajectory",
    "Ensemble",
    "simulate_forward",
    "reverse_step",
    "dps_step",
    "stsl_drift",
    "run_sampler",
    "block_rng",
]

GUIDANCE_MODES = ("none", "dps_continuous", "dps_discrete", "stsl")
DIVERGENCE = 1e6

# A path functional maps (t_hi, x_hi, t_lo, x_lo) over one grid step to per-path increments.
Functional = Callable[[float, np.ndarray, float, np.ndarray], np.ndarray]


def block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), int(block)]))


@dataclass(frozen=True)
class ZetaMode:
    """Step weight for discrete DPS: ``constant`` (value ``c``) or ``trajectory`` (value ``alpha``)."""

    kind: str = "constant"
    value: float = 1.0
    floor: float = ZETA_FLOOR

    def __post_init__(self):
        if self.kind not in ("constant", "trajectory"):
            raise ValueError(f"unknown zeta mode {self.kind!r}")
        if self.value < 0:
            raise ValueError("zeta value must be nonnegative")

    @classmethod
    def constant(cls, c: float) -> "ZetaMode":
        return cls("constant", c)

    @classmethod
    def trajectory(cls, alpha: float, floor: float = ZETA_FLOOR) -> "ZetaMode":
        return cls("trajectory", alpha, floor)


@dataclass(frozen=True)
class StslPotential:
    """``U(t, x) = tr Sigma_t(x)``; gradients by central differences with step ``h (1 + |x|)``."""

    h: float = 1e-4

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("finite-difference step must be positive")

    def value(self, prior, t: float, x) -> np.ndarray:
        ev = tweedie(prior, t, np.atleast_2d(x))
        return np.trace(ev.cov_hat, axis1=-2, axis2=-1)

    def steps(self, x: np.ndarray) -> np.ndarray:
        return self.h * (1.0 + np.linalg.norm(x, axis=-1))

    def grad(self, prior, t: float, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n, d = x.shape
        h = self.steps(x)
        out = np.empty_like(x)
        for k in range(d):
            e = np.zeros(d)
            e[k] = 1.0
            xp = x + h[:, None] * e
            xm = x - h[:, None] * e
            out[:, k] = (self.value(prior, t, xp) - self.value(prior, t, xm)) / (2 * h)
        return out

    def laplacian(self, prior, t: float, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n, d = x.shape
        h = self.steps(x)
        u0 = self.value(prior, t, x)
        out = np.zeros(n)
        for k in range(d):
            e = np.zeros(d)
            e[k] = 1.0
            up = self.value(prior, t, x + h[:, None] * e)
            um = self.value(prior, t, x - h[:, None] * e)
            out += (up - 2 * u0 + um) / h**2
        return out


@dataclass(frozen=True)
class SamplerConfig:
    """Reverse-sampler settings.

    ``i_stop``: guidance is applied only on steps ``i > i_stop``.
    ``integrator``: ``ddpm`` (ancestral step with the exact score) or ``em``.
    ``variance``: DDPM noise, ``posterior`` (``sigma~_i``) or ``moment``
    (adds the conditional-covariance term so the step's second moment is exact).
    ``record``: ``terminal``, ``states`` or ``full`` (per-step drift records).
    """

    grid: TimeGrid
    guidance: str = "none"
    zeta: ZetaMode = field(default_factory=ZetaMode)
    integrator: str = "ddpm"
    variance: str = "posterior"
    stsl_strength: float = 0.0
    stsl: StslPotential = field(default_factory=StslPotential)
    i_stop: int = 0
    seed: int = 0
    n_paths: int = 1000
    record: str = "terminal"
    block_size: int = 65536
    divergence_threshold: float = DIVERGENCE

    def __post_init__(self):
        if self.guidance not in GUIDANCE_MODES:
            raise ValueError(f"unknown guidance mode {self.guidance!r}")
        if self.integrator not in ("ddpm", "em"):
            raise ValueError(f"unknown integrator {self.integrator!r}")
        if self.variance not in ("posterior", "moment"):
            raise ValueError(f"unknown variance mode {self.variance!r}")
        if self.record not in ("terminal", "states", "full"):
            raise ValueError(f"unknown record level {self.record!r}")
        if not 0 <= self.i_stop <= self.grid.N:
            raise ValueError("i_stop outside [0, N]")
        if self.stsl_strength < 0:
            raise ValueError("stsl strength must be nonnegative")
        if self.n_paths < 1 or self.block_size < 1:
            raise ValueError("need at least one path")

    @property
    def T(self) -> float:
        return self.grid.T

    @property
    def t_stop(self) -> float:
        """Noise time below which guidance is off."""
        return float(self.grid.times[self.i_stop])


@dataclass
class Trajectory:
    """One realised path, ordered from step ``N`` (pure noise) down to step 0."""

    times: np.ndarray
    states: np.ndarray
    score_drift: np.ndarray | None = None
    guidance_drift: np.ndarray | None = None
    stsl_drift: np.ndarray | None = None
    noise_draw: np.ndarray | None = None
    zeta_used: np.ndarray | None = None
    stability_flag: np.ndarray | None = None
    diverged_at: int | None = None

    @property
    def increments(self) -> np.ndarray:
        """``delta_i = x_{i-1} - x_i`` in sampling order."""
        return np.diff(self.states, axis=0)


@dataclass
class Ensemble:
    """Output of :func:`run_sampler` or :func:`simulate_forward`.

    ``states`` (if recorded) has shape ``(n, N+1, d)`` in sampling order, so
    ``states[:, 0]`` is the start and ``states[:, -1]`` the end; ``times``
    is ordered the same way.  Per-step records have shape ``(n, N, ...)``.
    Diverged paths are NaN from the divergence step onwards.
    """

    times: np.ndarray
    terminal: np.ndarray
    initial: np.ndarray
    diverged: np.ndarray
    diverged_step: np.ndarray
    states: np.ndarray | None = None
    records: dict[str, np.ndarray] = field(default_factory=dict)
    functionals: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.terminal.shape[0]

    def path(self, j: int) -> Trajectory:
        if self.states is None:
            raise ValueError("ensemble was run without recording states")
        rec = {k: v[j] for k, v in self.records.items()}
        step = int(self.diverged_step[j])
        return Trajectory(self.times, self.states[j], diverged_at=step if step >= 0 else None, **rec)

    def summary(self) -> dict:
        ok = ~self.diverged
        x = self.terminal[ok]
        out = {
            "n_paths": int(self.n_paths),
            "n_diverged": int(self.diverged.sum()),
            "divergence_fraction": float(self.diverged.mean()),
        }
        if x.shape[0]:
            out["mean"] = x.mean(axis=0).tolist()
            out["cov"] = np.atleast_2d(np.cov(x.T)).tolist() if x.shape[0] > 1 else None
        return out


class _Kahan:
    """Compensated running sum for per-path functionals."""

    def __init__(self, n: int):
        self.s = np.zeros(n)
        self.c = np.zeros(n)

    def add(self, v: np.ndarray, idx=slice(None)):
        y = v - self.c[idx]
        t = self.s[idx] + y
        self.c[idx] = (t - self.s[idx]) - y
        self.s[idx] = t


# --------------------------------------------------------------------------
# forward


def simulate_forward(
    prior,
    grid: TimeGrid,
    x0=None,
    n_paths: int | None = None,
    seed: int = 0,
    record: str = "terminal",
    functionals: Mapping[str, Functional] | None = None,
    block_size: int = 65536,
) -> Ensemble:
    """Exact-in-law OU stepping ``x <- e^{-dt} x + sqrt(1 - e^{-2dt}) z``.

    ``x0`` is an ``(n, d)`` array of start points; if omitted, ``n_paths``
    starts are drawn from the prior.
    """
    functionals = dict(functionals or {})
    if x0 is None:
        if n_paths is None:
            raise ValueError("need x0 or n_paths")
        x0 = None
        n = n_paths
    else:
        x0 = np.atleast_2d(np.asarray(x0, dtype=float))
        n = x0.shape[0]
    d = prior.dim
    N = grid.N
    keep = record != "terminal"
    states = np.empty((n, N + 1, d)) if keep else None
    terminal = np.empty((n, d))
    initial = np.empty((n, d))
    acc = {k: _Kahan(n) for k in functionals}
    decay = np.exp(-grid.dt)
    sd = np.sqrt(-np.expm1(-2.0 * grid.dt))
    for b, lo in enumerate(range(0, n, block_size)):
        hi = min(lo + block_size, n)
        rng = block_rng(seed, b)
        if x0 is None:
            x = prior.sample(block_size, rng)[: hi - lo]
        else:
            x = x0[lo:hi].copy()
        initial[lo:hi] = x
        if keep:
            states[lo:hi, 0] = x
        for i in range(1, N + 1):
            z = rng.standard_normal((block_size, d))[: hi - lo]
            xn = decay[i - 1] * x + sd[i - 1] * z
            for k, f in functionals.items():
                acc[k].add(f(grid.times[i], xn, grid.times[i - 1], x), slice(lo, hi))
            x = xn
            if keep:
                states[lo:hi, i] = x
        terminal[lo:hi] = x
    return Ensemble(
        times=grid.times.copy(),
        terminal=terminal,
        initial=initial,
        diverged=np.zeros(n, dtype=bool),
        diverged_step=np.full(n, -1),
        states=states,
        functionals={k: a.s for k, a in acc.items()},
    )


# --------------------------------------------------------------------------
# reverse steps


def _ddpm_coeffs(grid: TimeGrid, i: int):
    ab = grid.alpha_bar
    ab_i, ab_p = ab[i], ab[i - 1]
    beta = -np.expm1(-2.0 * grid.dt[i - 1])
    c_x = np.sqrt(1.0 - beta) * (1.0 - ab_p) / (1.0 - ab_i)
    c_hat = np.sqrt(ab_p) * beta / (1.0 - ab_i)
    var = beta * (1.0 - ab_p) / (1.0 - ab_i)
    return c_x, c_hat, var


def _reverse_parts(prior, x, i, grid, mode, variance, ev: TweedieEval, z):
    """Deterministic increment and noise increment of one reverse step ``i -> i-1``."""
    d = x.shape[-1]
    if mode == "em":
        h = grid.dt[i - 1]
        return h * (x + 2.0 * ev.score), np.sqrt(2.0 * h) * z
    c_x, c_hat, var = _ddpm_coeffs(grid, i)
    drift = c_x * x + c_hat * ev.mean_hat - x
    if variance == "posterior" or i == 1 and var == 0:
        return drift, np.sqrt(var) * z
    cov = var * np.eye(d) + c_hat**2 * ev.cov_hat
    root = _sqrtm_psd(cov)
    return drift, np.matmul(root, z[..., None])[..., 0]


def _sqrtm_psd(cov: np.ndarray) -> np.ndarray:
    if cov.shape[-1] == 1:
        return np.sqrt(np.clip(cov, 0.0, None))
    if cov.shape[-1] == 2:
        # closed-form Cholesky factor
        a = np.sqrt(np.clip(cov[..., 0, 0], 0.0, None))
        b = np.divide(cov[..., 1, 0], a, out=np.zeros_like(a), where=a > 0)
        c = np.sqrt(np.clip(cov[..., 1, 1] - b * b, 0.0, None))
        out = np.zeros_like(cov)
        out[..., 0, 0], out[..., 1, 0], out[..., 1, 1] = a, b, c
        return out
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        lam, u = np.linalg.eigh(cov)
        return u * np.sqrt(np.clip(lam, 0.0, None))[..., None, :]


def reverse_step(prior, x, i: int, grid: TimeGrid, mode: str = "ddpm", rng=None,
                 variance: str = "posterior") -> np.ndarray:
    """One denoising step from grid index ``i`` to ``i - 1`` using the exact score."""
    if i < 1:
        raise ValueError("reverse step needs i >= 1")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    rng = rng or np.random.default_rng()
    ev = tweedie(prior, grid.times[i], x)
    drift, noise = _reverse_parts(prior, x, i, grid, mode, variance, ev, rng.standard_normal(x.shape))
    return x + drift + noise


def _measurement_residual(reward: RewardSpec, xhat):
    return xhat @ reward.A.T - reward.y


def _guidance(cfg: SamplerConfig, reward: RewardSpec, prior, i: int, x, ev: TweedieEval):
    """Guidance increment, zeta used and stability flag for step ``i``."""
    n = x.shape[0]
    zeta_used = np.zeros(n)
    flag = np.zeros(n, dtype=bool)
    if cfg.guidance == "none" or i <= cfg.i_stop:
        return np.zeros_like(x), zeta_used, flag
    h = cfg.grid.dt[i - 1]
    if cfg.guidance == "dps_discrete":
        r = _measurement_residual(reward, ev.mean_hat)
        nrm = np.linalg.norm(r, axis=-1)
        if cfg.zeta.kind == "constant":
            zeta_used[:] = cfg.zeta.value
        else:
            zeta_used, flag = zeta(cfg.zeta.value, nrm, floor=cfg.zeta.floor)
            zeta_used = np.asarray(zeta_used, dtype=float)
        # grad_x |y - A xhat(x)|^2 = 2 (grad xhat) A^T (A xhat - y)
        grad = 2.0 * np.matmul(ev.jac_mean, (r @ reward.A)[..., None])[..., 0]
        inc = -zeta_used[:, None] * grad
        zero = nrm == 0.0
        inc[zero] = 0.0
        flag |= zero
        return inc, zeta_used, flag
    flag = nonsmooth_mask(reward, ev.mean_hat)
    g = guidance_from_tweedie(reward, ev, nonsmooth="zero")
    zeta_used[:] = h
    return h * g, zeta_used, flag


def dps_step(prior, reward: RewardSpec, x, i: int, grid: TimeGrid, zeta_mode: ZetaMode | None = None,
             rng=None, integrator: str = "ddpm", variance: str = "moment") -> np.ndarray:
    """Reverse step followed by an explicit guidance update.

    With ``zeta_mode`` set this is the discrete DPS update
    ``x <- x' - zeta_i grad_x |y - A xhat(x)|^2``; otherwise the guidance
    drift is integrated with step ``dt_i``.
    """
    guidance = "dps_discrete" if zeta_mode is not None else "dps_continuous"
    cfg = SamplerConfig(grid=grid, guidance=guidance, zeta=zeta_mode or ZetaMode(),
                        integrator=integrator, variance=variance)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    rng = rng or np.random.default_rng()
    ev = tweedie(prior, grid.times[i], x)
    drift, noise = _reverse_parts(prior, x, i, grid, integrator, variance, ev, rng.standard_normal(x.shape))
    g, _, _ = _guidance(cfg, reward, prior, i, x, ev)
    return x + drift + noise + g


def stsl_drift(prior, t: float, x, r: float, pot: StslPotential | None = None) -> np.ndarray:
    """STSL drift ``-r grad tr Sigma_t(x)``."""
    if t <= 0:
        raise ValueError("stsl drift needs t > 0")
    if r < 0:
        raise ValueError("stsl strength must be nonnegative")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if r == 0:
        return np.zeros_like(x)
    pot = pot or StslPotential()
    return -r * pot.grad(prior, t, x)


# --------------------------------------------------------------------------
# ensembles


def run_sampler(
    cfg: SamplerConfig,
    prior,
    reward: RewardSpec | None = None,
    functionals: Mapping[str, Functional] | None = None,
) -> Ensemble:
    """Run ``cfg.n_paths`` reverse trajectories from ``N(0, I)``.

    ``functionals`` are accumulated along each path; each receives the noise
    times and states at both ends of a step, higher noise time first.
    """
    if cfg.guidance != "none" and reward is None:
        raise ValueError("guided sampler needs a reward")
    functionals = dict(functionals or {})
    grid, N, n, d = cfg.grid, cfg.grid.N, cfg.n_paths, prior.dim
    keep = cfg.record != "terminal"
    full = cfg.record == "full"
    states = np.full((n, N + 1, d), np.nan) if keep else None
    records = {}
    if full:
        for k in ("score_drift", "guidance_drift", "stsl_drift", "noise_draw"):
            records[k] = np.full((n, N, d), np.nan)
        records["zeta_used"] = np.zeros((n, N))
        records["stability_flag"] = np.zeros((n, N), dtype=bool)
    terminal = np.full((n, d), np.nan)
    initial = np.empty((n, d))
    diverged = np.zeros(n, dtype=bool)
    diverged_step = np.full(n, -1)
    acc = {k: _Kahan(n) for k in functionals}
    B = cfg.block_size
    for b, lo in enumerate(range(0, n, B)):
        hi = min(lo + B, n)
        m = hi - lo
        rng = block_rng(cfg.seed, b)
        x = rng.standard_normal((B, d))[:m]
        initial[lo:hi] = x
        if keep:
            states[lo:hi, 0] = x
        alive = np.ones(m, dtype=bool)
        for step, i in enumerate(range(N, 0, -1)):
            z = rng.standard_normal((B, d))[:m]
            idx = np.flatnonzero(alive)
            if idx.size == 0:
                break
            xa = x[idx]
            ev = tweedie(prior, grid.times[i], xa)
            drift, noise = _reverse_parts(prior, xa, i, grid, cfg.integrator, cfg.variance, ev, z[idx])
            g, zu, flag = _guidance(cfg, reward, prior, i, xa, ev)
            if cfg.guidance == "stsl" and cfg.stsl_strength > 0 and i > cfg.i_stop:
                sd = grid.dt[i - 1] * stsl_drift(prior, grid.times[i], xa, cfg.stsl_strength, cfg.stsl)
            else:
                sd = np.zeros_like(xa)
            xn = xa + drift + g + sd + noise
            bad = ~np.all(np.isfinite(xn), axis=-1) | (np.linalg.norm(xn, axis=-1) > cfg.divergence_threshold)
            gl = lo + idx
            for k, f in functionals.items():
                inc = f(grid.times[i], xa, grid.times[i - 1], xn)
                acc[k].add(np.where(bad, 0.0, inc), gl)
            if bad.any():
                diverged[gl[bad]] = True
                diverged_step[gl[bad]] = step + 1
                xn[bad] = np.nan
                alive[idx[bad]] = False
            x[idx] = xn
            if keep:
                states[gl, step + 1] = xn
            if full:
                records["score_drift"][gl, step] = drift
                records["guidance_drift"][gl, step] = g
                records["stsl_drift"][gl, step] = sd
                records["noise_draw"][gl, step] = noise
                records["zeta_used"][gl, step] = zu
                records["stability_flag"][gl, step] = flag
        terminal[lo:hi] = x
    if diverged.any():
        log.info("%d of %d paths diverged", diverged.sum(), n)
    for k in functionals:
        acc[k].s[diverged] = np.nan
    return Ensemble(
        times=grid.times[::-1].copy(),
        terminal=terminal,
        initial=initial,
        diverged=diverged,
        diverged_step=diverged_step,
        states=states,
        records=records,
        functionals={k: a.s for k, a in acc.items()},
    )
