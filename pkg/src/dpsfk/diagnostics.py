"""Grid oracles, distribution metrics and instability instrumentation."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.special import logsumexp

from .feynman_kac import EstimatorError, weight_forward
from .priors import RingPrior, log_density, tweedie
from .rewards import RewardSpec, reward_value
from .schedules import TimeGrid
from .sde import Ensemble, SamplerConfig, ZetaMode, run_sampler

log = logging.getLogger(__name__)

__all__ = [
    "BoundsError",
    "GridOracle",
    "Histogram",
    "grid_posterior",
    "histogram",
    "tv_distance",
    "kl_divergence",
    "OverUnderMap",
    "over_under_map",
    "histogram_ratio_map",
    "AlignmentSeries",
    "oscillation_alpha",
    "collapse_onset",
    "StabilityReport",
    "tangent_projector",
    "ring_tangent_projector",
    "stability_margin",
    "trajectory_stability",
    "SignFlowResult",
    "sign_flow_demo",
    "squared_vs_unsquared_study",
]

KL_FLOOR = 1e-300


class BoundsError(ValueError):
    pass


# --------------------------------------------------------------------------
# grids and metrics


@dataclass
class GridOracle:
    """Normalised density on a regular grid of cell centres.

    ``values`` has shape ``resolution``; ``values.sum() * cell_volume == 1``.
    """

    bounds: list[tuple[float, float]]
    resolution: tuple[int, ...]
    values: np.ndarray
    richardson_tv: float | None = None

    @property
    def edges(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, n + 1) for (lo, hi), n in zip(self.bounds, self.resolution)]

    @property
    def axes(self) -> list[np.ndarray]:
        return [0.5 * (e[1:] + e[:-1]) for e in self.edges]

    @property
    def cell_volume(self) -> float:
        return float(np.prod([(hi - lo) / n for (lo, hi), n in zip(self.bounds, self.resolution)]))

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack(mesh, axis=-1).reshape(-1, len(self.bounds))

    def cell_mass(self) -> np.ndarray:
        return self.values * self.cell_volume


@dataclass
class Histogram:
    """Normalised histogram density over explicit ``edges``."""

    edges: list[np.ndarray]
    values: np.ndarray
    counts: np.ndarray
    n: float

    @property
    def cell_volume(self) -> np.ndarray:
        widths = [np.diff(e) for e in self.edges]
        return np.prod(np.meshgrid(*widths, indexing="ij"), axis=0)


def _cells(bounds, resolution):
    edges = [np.linspace(lo, hi, n + 1) for (lo, hi), n in zip(bounds, resolution)]
    axes = [0.5 * (e[1:] + e[:-1]) for e in edges]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack(mesh, axis=-1).reshape(-1, len(bounds))


def _log_target(prior, reward: RewardSpec | None, pts: np.ndarray) -> np.ndarray:
    out = log_density(prior, 0.0, pts)
    if reward is not None:
        out = out + reward_value(reward, pts)
    return out


def _grid_log_mass(prior, reward, bounds, resolution):
    pts = _cells(bounds, resolution)
    vol = np.prod([(hi - lo) / n for (lo, hi), n in zip(bounds, resolution)])
    return (_log_target(prior, reward, pts) + np.log(vol)).reshape(resolution)


def grid_posterior(prior, reward: RewardSpec | None, bounds, resolution, check: bool = True,
                   outside_tol: float = 1e-6, richardson_tol: float = 1e-4) -> GridOracle:
    """Midpoint-rule quadrature of ``e^R rho_*`` normalised on the grid.

    With ``check`` the grid is widened by half its extent at equal cell size
    to bound the mass outside ``bounds`` (error ``bounds too tight`` above
    ``outside_tol``), and the resolution-doubling TV is recorded.
    """
    bounds = [(float(lo), float(hi)) for lo, hi in bounds]
    d = len(bounds)
    if d > 2:
        raise ValueError("grid oracles support at most two dimensions")
    resolution = tuple(int(r) for r in (resolution if np.ndim(resolution) else [resolution] * d))
    if len(resolution) != d or min(resolution) < 50:
        raise ValueError("need at least 50 cells per axis")
    if prior.dim != d:
        raise ValueError("bounds do not match prior dimension")
    lm = _grid_log_mass(prior, reward, bounds, resolution)
    logz = logsumexp(lm)
    values = np.exp(lm - logz)
    vol = np.prod([(hi - lo) / n for (lo, hi), n in zip(bounds, resolution)])
    values /= values.sum() * vol
    rich = None
    if check:
        wide, wres = [], []
        for (lo, hi), n in zip(bounds, resolution):
            pad = int(np.ceil(n / 2))
            h = (hi - lo) / n
            wide.append((lo - pad * h, hi + pad * h))
            wres.append(n + 2 * pad)
        lw = _grid_log_mass(prior, reward, wide, tuple(wres))
        inner = tuple(slice(int(np.ceil(n / 2)), int(np.ceil(n / 2)) + n) for n in resolution)
        outside = 1.0 - np.exp(logsumexp(lw[inner]) - logsumexp(lw))
        if outside > outside_tol:
            raise BoundsError("bounds too tight")
        fine = _grid_log_mass(prior, reward, bounds, tuple(2 * n for n in resolution))
        pf = np.exp(fine - logsumexp(fine))
        for k in range(d):
            shp = list(pf.shape)
            shp[k : k + 1] = [shp[k] // 2, 2]
            pf = pf.reshape(shp).sum(axis=k + 1)
        rich = 0.5 * float(np.abs(pf - values * vol).sum())
        if rich > richardson_tol:
            warnings.warn(f"grid oracle not converged under refinement (TV {rich:.2e})", RuntimeWarning, stacklevel=2)
    return GridOracle(bounds, resolution, values, rich)


def histogram(samples, edges, weights=None) -> Histogram:
    """Normalised histogram of ``samples`` (``(n, d)``) over ``edges`` (list per axis).

    Non-finite samples are dropped; mass falling outside ``edges`` is kept
    in the normaliser so the histogram integrates to the inside fraction.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    if x.shape[0] == 1 and x.shape[1] != len(edges):
        x = x.T
    edges = [np.asarray(e, dtype=float) for e in edges]
    ok = np.all(np.isfinite(x), axis=-1)
    w = None if weights is None else np.asarray(weights, dtype=float)[ok]
    counts, _ = np.histogramdd(x[ok], bins=edges, weights=w)
    total = float(ok.sum() if w is None else w.sum())
    h = Histogram(edges, np.zeros_like(counts), counts, total)
    h.values = counts / (total * h.cell_volume)
    return h


def _mass(a) -> tuple[np.ndarray, list[np.ndarray]]:
    if isinstance(a, GridOracle):
        return a.cell_mass(), a.edges
    if isinstance(a, Histogram):
        return a.values * a.cell_volume, a.edges
    raise TypeError("expected a GridOracle or Histogram")


def _matched(a, b):
    ma, ea = _mass(a)
    mb, eb = _mass(b)
    if ma.shape != mb.shape or any(x.shape != y.shape or not np.allclose(x, y, rtol=0, atol=1e-12) for x, y in zip(ea, eb)):
        raise ValueError("grid mismatch")
    return ma, mb


def tv_distance(a, b) -> float:
    ma, mb = _matched(a, b)
    return 0.5 * float(np.abs(ma - mb).sum())


def kl_divergence(a, b, floor: float = KL_FLOOR) -> float:
    """``KL(a || b)`` over shared cells with both masses floored."""
    ma, mb = _matched(a, b)
    pa = np.maximum(ma, floor)
    pb = np.maximum(mb, floor)
    return float(np.sum(np.where(ma > 0, ma * (np.log(pa) - np.log(pb)), 0.0)))


# --------------------------------------------------------------------------
# over/under-sampling maps


@dataclass
class OverUnderMap:
    """Per-cell ``log(1/omega)``: positive where the sampler over-samples."""

    points: np.ndarray
    log_inv_omega: np.ndarray
    std_error: np.ndarray
    computed: np.ndarray
    n_paths: int
    normalization: str = "absolute"

    def rows(self) -> np.ndarray:
        return np.column_stack([self.points, self.log_inv_omega, self.std_error, self.computed.astype(float)])


def over_under_map(prior, reward: RewardSpec, points, grid: TimeGrid, n_paths: int = 20, seed: int = 0,
                   mask=None, normalization: str = "auto") -> OverUnderMap:
    """Forward-weight estimates of ``log(1/omega)`` at each point.

    Points with ``mask`` false are not computed (NaN, flag 0); each computed
    point draws its paths from its own stream ``(seed, index)``.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n = pts.shape[0]
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    val = np.full(n, np.nan)
    se = np.full(n, np.nan)
    ok = np.zeros(n, dtype=bool)
    norm = "absolute"
    for j in np.flatnonzero(mask):
        try:
            w = weight_forward(prior, reward, pts[j], grid, n_paths=n_paths,
                               seed=int(np.random.SeedSequence([seed, j]).generate_state(1)[0]),
                               normalization=normalization)
        except EstimatorError:
            continue
        val[j], se[j], ok[j], norm = -w.log_mean_weight, w.std_error, True, w.normalization
    return OverUnderMap(pts, val, se, ok, n_paths, norm)


def histogram_ratio_map(samples, oracle: GridOracle, min_count: int = 0):
    """``log(nu_hist / mu)`` per oracle cell with a Poisson standard error ``1/sqrt(count)``.

    Returns ``(log_ratio, std_error, counts)`` flattened in oracle point order;
    cells with fewer than ``min_count`` samples are NaN.
    """
    h = histogram(samples, oracle.edges)
    mu = oracle.cell_mass()
    nu = h.values * h.cell_volume
    counts = h.counts
    with np.errstate(divide="ignore", invalid="ignore"):
        lr = np.log(nu) - np.log(mu)
        se = 1.0 / np.sqrt(counts)
    bad = counts < max(min_count, 1)
    lr[bad] = np.nan
    se[bad] = np.nan
    return lr.ravel(), se.ravel(), counts.ravel()


# --------------------------------------------------------------------------
# step alignment


@dataclass
class AlignmentSeries:
    """``alpha[s]`` is the cosine between consecutive projected increments
    ``delta_{s-1}`` and ``delta_s`` (``NaN`` where undefined)."""

    alpha: np.ndarray
    window: int
    top_k: int

    def tail_mean(self, n: int = 25) -> float:
        return float(np.nanmean(self.alpha[-n:]))


def _increments(traj) -> np.ndarray:
    if hasattr(traj, "states"):
        traj = traj.states
    x = np.asarray(traj, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return np.diff(x, axis=0)


def oscillation_alpha(traj, window: int = 50, top_k: int = 10) -> AlignmentSeries:
    """Step-over-step alignment of increments within a rolling principal subspace.

    For each step ``s`` the last ``window`` increments (ending at ``s``) are
    stacked, their top ``top_k`` right singular vectors span the subspace,
    and ``alpha_s`` is the cosine of the projections of ``delta_{s-1}`` and
    ``delta_s``.  Accepts a :class:`~dpsfk.sde.Trajectory` or a state array.
    """
    delta = _increments(traj)
    n, d = delta.shape
    if not n > window >= top_k >= 1:
        raise ValueError("need trajectory length > window >= top_k >= 1")
    alpha = np.full(n, np.nan)
    for s in range(1, n):
        w = delta[max(0, s - window + 1) : s + 1]
        if not np.all(np.isfinite(w)):
            continue
        a, b = delta[s - 1], delta[s]
        if top_k < d:
            _, sv, vt = np.linalg.svd(w, full_matrices=False)
            v = vt[: min(top_k, int((sv > sv[0] * 1e-12).sum()) or 1)]
            a, b = v.T @ (v @ a), v.T @ (v @ b)
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            continue
        alpha[s] = np.clip(a @ b / (na * nb), -1.0, 1.0)
    return AlignmentSeries(alpha, window, top_k)


def collapse_onset(alpha, threshold: float = -0.5, smooth: int = 5) -> int | None:
    """First step of the final stretch over which the trailing ``smooth``-step
    mean of ``alpha`` stays at or below ``threshold``; ``None`` if the series
    does not end collapsed."""
    a = np.asarray(alpha.alpha if isinstance(alpha, AlignmentSeries) else alpha, dtype=float)
    a = np.where(np.isfinite(a), a, 0.0)
    if a.size < smooth:
        return None
    m = np.convolve(a, np.ones(smooth) / smooth, mode="valid")  # m[j] covers a[j : j + smooth]
    below = m <= threshold
    if not below[-1]:
        return None
    j = below.size - 1
    while j > 0 and below[j - 1]:
        j -= 1
    return j + smooth - 1


# --------------------------------------------------------------------------
# forward-Euler stability


@dataclass
class StabilityReport:
    """``satisfied`` is exactly ``lhs <= rhs`` with ``lhs = sigma_max(A P)^2``
    and ``rhs = 2 |A x - y|``; ``margin = rhs - lhs``."""

    lhs: np.ndarray
    rhs: np.ndarray

    @property
    def satisfied(self) -> np.ndarray:
        return self.lhs <= self.rhs

    @property
    def margin(self) -> np.ndarray:
        return self.rhs - self.lhs

    def first_violation(self) -> int | None:
        bad = np.flatnonzero(~np.atleast_1d(self.satisfied))
        return int(bad[0]) if bad.size else None


def tangent_projector(cov, factor: float = 0.5) -> np.ndarray:
    """Projector onto eigenvectors of ``cov`` with eigenvalue above ``factor`` times the largest."""
    cov = np.asarray(cov, dtype=float)
    lam, u = np.linalg.eigh(cov)
    keep = lam >= factor * lam[..., -1:]
    return np.einsum("...ik,...k,...jk->...ij", u, keep.astype(float), u)


def ring_tangent_projector(prior: RingPrior, x) -> np.ndarray:
    """Projector onto the circle tangent at the angle of ``x`` about the centre."""
    v = np.asarray(x, dtype=float) - prior.center
    nrm = np.linalg.norm(v)
    if nrm == 0:
        return np.eye(2)
    u = np.array([-v[1], v[0]]) / nrm
    return np.outer(u, u)


def stability_margin(A, P, x, y) -> StabilityReport:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    d = A.shape[1]
    P = np.eye(d) if P is None else np.asarray(P, dtype=float)
    sv = np.linalg.svd(np.matmul(A, P), compute_uv=False)
    lhs = np.broadcast_to(sv[..., 0] ** 2, (x.shape[0],)).astype(float)
    rhs = 2.0 * np.linalg.norm(x @ A.T - y, axis=-1)
    if x.shape[0] == 1:
        return StabilityReport(lhs[0], rhs[0])
    return StabilityReport(lhs, rhs)


def trajectory_stability(prior, reward: RewardSpec, states, grid: TimeGrid, projector: str = "soft",
                         factor: float = 0.5) -> StabilityReport:
    """Stability inequality along a sampled path, one entry per reverse step.

    Entry ``s`` uses the state before step ``s`` (noise time ``t_{N-s}``) and
    its Tweedie mean ``xhat`` for the residual.  ``projector`` selects the
    tangent projector: ``soft`` (dominant eigenvectors of ``Sigma_t``),
    ``identity``, or ``ring`` (exact circle tangent at ``xhat``, ring priors only).
    """
    if projector not in ("soft", "identity", "ring"):
        raise ValueError(f"unknown projector {projector!r}")
    if projector == "ring" and not isinstance(prior, RingPrior):
        raise ValueError("ring projector needs a ring prior")
    states = np.asarray(states, dtype=float)
    times = grid.times[::-1][:-1]
    pre = states[:-1]
    lhs = np.full(times.size, np.nan)
    rhs = np.full(times.size, np.nan)
    ok = np.all(np.isfinite(pre), axis=-1)
    for s in np.flatnonzero(ok):
        ev = tweedie(prior, times[s], pre[s])
        if projector == "soft":
            P = tangent_projector(ev.cov_hat, factor)
        elif projector == "ring":
            P = ring_tangent_projector(prior, ev.mean_hat)
        else:
            P = None
        rep = stability_margin(reward.A, P, ev.mean_hat, reward.y)
        lhs[s], rhs[s] = rep.lhs, rep.rhs
    return StabilityReport(lhs, rhs)


# --------------------------------------------------------------------------
# sign flow


@dataclass
class SignFlowResult:
    series: np.ndarray
    period: int | None
    amplitude: float | None
    cycle: tuple[float, ...]


def _exact(v) -> Fraction:
    return v if isinstance(v, Fraction) else Fraction(repr(float(v))) if isinstance(v, float) else Fraction(v)


def sign_flow_demo(x0, dt, n_steps: int = 100) -> SignFlowResult:
    """Iterate ``x <- x - dt sign(x)`` with ``sign(0) = 0`` in exact rational arithmetic.

    Float inputs are read as their shortest decimal representation.  The
    period is the smallest ``p`` with ``x_{n+p} = x_n`` at the end of the run;
    the amplitude is half the peak-to-peak range of that cycle.
    """
    x = _exact(x0)
    h = _exact(dt)
    if h <= 0:
        raise ValueError("dt must be positive")
    seq = [x]
    for _ in range(n_steps):
        x = x - h * ((x > 0) - (x < 0))
        seq.append(x)
    period = None
    for p in range(1, min(8, n_steps // 2) + 1):
        tail = seq[-2 * p :]
        if tail[:p] == tail[p:]:
            period = p
            break
    cycle: tuple[float, ...] = ()
    amp = None
    if period is not None:
        vals = seq[-period:]
        cycle = tuple(sorted(float(v) for v in set(vals)))
        amp = float((max(vals) - min(vals)) / 2)
    return SignFlowResult(np.array([float(v) for v in seq]), period, amp, cycle)


# --------------------------------------------------------------------------
# squared vs unsquared residuals


def squared_vs_unsquared_study(prior, A, y, grid: TimeGrid, n_paths: int = 200, seed: int = 0,
                               zeta_large: float = 5.0, zeta_small: float = 1e-3, alpha: float = 0.5,
                               bound_factor: float = 4.0) -> dict:
    """Matched discrete-DPS ensembles under three guidance regimes.

    ``squared_unstable``: constant weight ``zeta_large`` on ``|y - A xhat|^2``;
    ``squared_stable``: constant ``zeta_small``; ``unsquared``: trajectory
    weight ``alpha / |y - A xhat|``, i.e. steps on ``2 alpha |A xhat - y|``.
    Each report gives the divergence fraction and terminal residual
    quantiles; for ``unsquared`` it also checks residuals against
    ``bound_factor * alpha * sigma_max(A)``.
    """
    reward = RewardSpec.quadratic(A, y, 1.0)
    smax = float(np.linalg.svd(np.atleast_2d(A), compute_uv=False)[0])
    regimes = {
        "squared_unstable": ZetaMode.constant(zeta_large),
        "squared_stable": ZetaMode.constant(zeta_small),
        "unsquared": ZetaMode.trajectory(alpha),
    }
    out = {"sigma_max": smax, "alpha": alpha}
    for name, zm in regimes.items():
        cfg = SamplerConfig(grid=grid, guidance="dps_discrete", zeta=zm, n_paths=n_paths, seed=seed)
        ens = run_sampler(cfg, prior, reward)
        res = np.linalg.norm(reward.residual(ens.terminal[~ens.diverged]), axis=-1)
        rep = {
            "divergence_fraction": float(ens.diverged.mean()),
            "n_diverged": int(ens.diverged.sum()),
            "residual_quantiles": (np.quantile(res, [0.5, 0.9, 1.0]).tolist() if res.size else None),
        }
        if name == "unsquared":
            bound = bound_factor * alpha * smax
            rep["residual_bound"] = bound
            rep["within_bound"] = bool(res.size and res.max() <= bound)
        out[name] = rep
    return out
