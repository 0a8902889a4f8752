"""Reaction coefficients and Feynman-Kac weight estimators for guided samplers.

A guided sampler follows the tilted path ``pi_t = h_t rho_t / Z_t`` with
``log h_t(x) = eta_t R(xhat_t(x))`` (``eta = 1`` for DPS).  Its reaction is

    c[h] = d_t log h - (2 grad log rho_t + x) . grad log h - |grad log h|^2 - lap log h,

which after the backward-equation cancellation for ``xhat_t`` reduces to
``c[h] = deta/dt R(xhat) - c~[eta R]`` with

    c~[R](t, x) = tr(J D^2R(xhat) J) + |J grad R(xhat)|^2,    J = grad xhat_t = Sigma_t / (e^t - e^{-t}).

The sampler output ``nu`` relates to the target ``pi_0`` through

    nu / pi_0 (x) = Z_0 E_OU[ gamma / (h_T rho_T) (X_T) exp(int_0^T c[h](s, X_s) ds) | X_0 = x ],

and, along sampler paths ending at ``x``,

    pi_0 / nu (x) = E[ (h_T rho_T / gamma)(Y_0) exp(-int_0^T c[h](T - s, Y_s) ds) | Y_T = x ] / Z_0.

``omega = pi_0 / nu`` is the weight that turns sampler output into the target.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.special import logsumexp

from .priors import GaussianMixturePrior, log_density, log_evidence, score, tweedie
from .rewards import RewardSpec, reward_grad, reward_hess, reward_value
from .schedules import AnnealingSchedule, TimeGrid, deta_dt, eta
from .sde import Ensemble, StslPotential, simulate_forward

log = logging.getLogger(__name__)

__all__ = [
    "EstimatorError",
    "ReactionEval",
    "SpectralReaction",
    "WeightEstimate",
    "BinnedWeights",
    "EarlyStopDensity",
    "Tilt",
    "c_tilde",
    "c_dps",
    "c_dps_spectral",
    "reaction_fd",
    "c_star_dps",
    "c_u",
    "dps_surrogate_score",
    "weight_forward",
    "backward_functional",
    "path_log_weights",
    "weight_backward",
    "early_stopping_density",
    "importance_resample",
    "effective_sample_size",
]

ESS_WARN = 0.01


class EstimatorError(RuntimeError):
    pass


def _batch(x, d):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    return np.atleast_2d(x).reshape(-1, d), single


# --------------------------------------------------------------------------
# reaction coefficients


@dataclass(frozen=True)
class ReactionEval:
    """Spatial part of the DPS reaction, ``c_DPS = -total - d/dt log Z_t``.

    ``trace_term = tr(Sigma D^2R Sigma) / (e^t - e^{-t})^2`` and
    ``grad_term = |Sigma grad R|^2 / (e^t - e^{-t})^2``.  ``grad_term_unscaled``
    keeps ``|Sigma grad R|^2`` without the prefactor for comparison; it is not
    part of ``total``.
    """

    trace_term: np.ndarray
    grad_term: np.ndarray
    grad_term_unscaled: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.trace_term + self.grad_term

    @property
    def c_dps(self) -> np.ndarray:
        """``c_DPS`` up to its spatially constant part."""
        return -self.total


def _reward_derivs(reward: RewardSpec, xhat, nonsmooth):
    return reward_grad(reward, xhat, nonsmooth=nonsmooth), reward_hess(reward, xhat, nonsmooth=nonsmooth)


def _reaction_parts(reward, ev, nonsmooth="raise"):
    J = ev.jac_mean
    g, H = _reward_derivs(reward, ev.mean_hat, nonsmooth)
    JH = np.matmul(J, H)
    trace = (JH * J).sum(axis=(-2, -1))  # J symmetric
    Jg = np.matmul(J, g[..., None])[..., 0]
    grad = (Jg * Jg).sum(axis=-1)
    Sg = np.matmul(ev.cov_hat, g[..., None])[..., 0]
    return trace, grad, (Sg * Sg).sum(axis=-1)


def c_tilde(prior, reward: RewardSpec | None, t: float, x, nonsmooth: str = "raise") -> np.ndarray:
    """``c~_DPS(t, x)``, evaluated through ``grad xhat_t`` (bounded as ``t -> 0``)."""
    x, single = _batch(x, prior.dim)
    if reward is None:
        out = np.zeros(x.shape[0])
    else:
        trace, grad, _ = _reaction_parts(reward, tweedie(prior, t, x), nonsmooth)
        out = trace + grad
    return out[0] if single else out


def c_dps(prior, reward: RewardSpec, t: float, x, nonsmooth: str = "raise") -> ReactionEval:
    x, single = _batch(x, prior.dim)
    trace, grad, raw = _reaction_parts(reward, tweedie(prior, t, x), nonsmooth)
    if single:
        return ReactionEval(trace[0], grad[0], raw[0])
    return ReactionEval(trace, grad, raw)


@dataclass(frozen=True)
class SpectralReaction:
    """Eigen-decomposition form ``sum_i lambda_i^2 gamma_i / (e^t - e^{-t})^2``."""

    t: float
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    gamma: np.ndarray
    total: np.ndarray
    total_quadratic_form: np.ndarray
    reconstruction_error: np.ndarray
    orthonormality_error: np.ndarray


def c_dps_spectral(prior, reward: RewardSpec, t: float, x, nonsmooth: str = "raise") -> SpectralReaction:
    """Spectral reaction with ``gamma_i = u_i^T D^2R u_i + (u_i . grad R)^2``.

    ``total`` is the diagonal sum as written above.  ``total_quadratic_form``
    instead evaluates the gradient part as the full form
    ``sum_ij lambda_i lambda_j (u_i . g)(u_j . g)(u_i . u_j)``; the two agree
    whenever the eigenvectors are orthonormal.
    """
    x, single = _batch(x, prior.dim)
    ev = tweedie(prior, t, x)
    cov = ev.cov_hat
    try:
        lam, u = np.linalg.eigh(cov)
    except np.linalg.LinAlgError:
        cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
        lam, u = np.linalg.eigh(cov + 1e-14 * np.eye(prior.dim))
    lam = np.clip(lam, 0.0, None)
    g, H = _reward_derivs(reward, ev.mean_hat, nonsmooth)
    ug = np.einsum("nki,nk->ni", u, g)  # u_i . g
    uHu = np.einsum("nki,nkl,nli->ni", u, H, u)
    gam = uHu + ug**2
    s2 = (2.0 * np.sinh(t)) ** 2
    total = (lam**2 * gam).sum(axis=-1) / s2
    gram = np.einsum("nki,nkj->nij", u, u)
    lu = lam * ug
    quad = np.einsum("ni,nij,nj->n", lu, gram, lu)
    total_q = ((lam**2) * uHu).sum(axis=-1) / s2 + quad / s2
    recon = np.abs(np.einsum("nik,nk,njk->nij", u, lam, u) - cov).max(axis=(-2, -1))
    orth = np.abs(gram - np.eye(prior.dim)).max(axis=(-2, -1))
    out = SpectralReaction(t, lam, u, gam, total, total_q, recon, orth)
    if single:
        out = SpectralReaction(t, lam[0], u[0], gam[0], total[0], total_q[0], recon[0], orth[0])
    return out


def reaction_fd(prior, log_h: Callable[[float, np.ndarray], np.ndarray], t: float, x,
                ht: float = 1e-4, hx: float = 1e-4) -> np.ndarray:
    """Generic tilt reaction ``c[h]`` by central differences of ``log h`` in ``t`` and ``x``."""
    x, single = _batch(x, prior.dim)
    n, d = x.shape
    dt_logh = (log_h(t + ht, x) - log_h(t - ht, x)) / (2 * ht)
    l0 = log_h(t, x)
    grad = np.empty((n, d))
    lap = np.zeros(n)
    for k in range(d):
        e = np.zeros(d)
        e[k] = hx
        lp, lm = log_h(t, x + e), log_h(t, x - e)
        grad[:, k] = (lp - lm) / (2 * hx)
        lap += (lp - 2 * l0 + lm) / hx**2
    drift = 2.0 * score(prior, t, x) + x
    out = dt_logh - (drift * grad).sum(axis=-1) - (grad * grad).sum(axis=-1) - lap
    return out[0] if single else out


@dataclass(frozen=True)
class Tilt:
    """Tilt ``log h_t(x) = eta_t R(xhat_t(x))``; ``schedule=None`` means ``eta = 1``.

    ``nonsmooth='zero'`` drops the reward derivatives at exact kinks of the
    unsquared reward instead of raising.
    """

    reward: RewardSpec | None
    schedule: AnnealingSchedule | None = None
    nonsmooth: str = "raise"

    def eta(self, t) -> float:
        return 1.0 if self.schedule is None else eta(self.schedule, t)

    def deta(self, t) -> float:
        return 0.0 if self.schedule is None else deta_dt(self.schedule, t)

    def reward_at(self, t) -> RewardSpec | None:
        e = self.eta(t)
        return None if self.reward is None else self.reward.scaled(e)

    def log_h(self, prior, t: float, x) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.reward is None:
            return np.zeros(x.shape[0])
        xhat = x if t == 0 else tweedie(prior, t, x).mean_hat
        return self.eta(t) * reward_value(self.reward, xhat)

    def reaction(self, prior, t: float, x) -> np.ndarray:
        """Analytic ``c[h](t, x) = deta/dt R(xhat) - c~[eta R]``."""
        x = np.atleast_2d(x)
        if self.reward is None:
            return np.zeros(x.shape[0])
        ev = tweedie(prior, t, x)
        trace, grad, _ = _reaction_parts(self.reward, ev, self.nonsmooth)
        e = self.eta(t)
        out = -(e * trace + e * e * grad)
        de = self.deta(t)
        if de != 0.0:
            out = out + de * reward_value(self.reward, ev.mean_hat)
        return out

    def log_Z0(self, prior) -> float | None:
        """``log int h_0 rho_*`` when available in closed form."""
        if self.reward is None:
            return 0.0
        if not isinstance(prior, GaussianMixturePrior) or self.reward.kind == "unsquared":
            return None
        return float(log_evidence(prior, self.reward.scaled(self.eta(0.0))))


def c_star_dps(prior, reward: RewardSpec, sched: AnnealingSchedule, t: float, x,
               form: str = "derived") -> np.ndarray:
    """Reaction of the annealed tilt ``h_t = exp(eta_t R(xhat_t))``, spatial part.

    ``form='derived'`` returns ``deta/dt R(xhat_t(x)) - c~[eta_t R](t, x)``, which
    is the generic tilt reaction for this path.  ``form='display'`` returns
    ``-eta_t c~[R](t, x) - deta/dt R(x)``, the shorthand that scales the whole
    reaction by ``eta`` and evaluates the reward at ``x``; it is kept for
    comparison only.
    """
    x, single = _batch(x, prior.dim)
    if form == "derived":
        out = Tilt(reward, sched).reaction(prior, t, x)
    elif form == "display":
        out = -eta(sched, t) * c_tilde(prior, reward, t, x) - deta_dt(sched, t) * reward_value(reward, x)
    else:
        raise ValueError(f"unknown form {form!r}")
    return out[0] if single else out


def dps_surrogate_score(prior, reward: RewardSpec | None) -> Callable[[float, np.ndarray], np.ndarray]:
    """``grad log (e^{R(xhat_t)} rho_t) = grad log rho_t + J grad R(xhat_t)``."""

    def f(t, x):
        x = np.atleast_2d(x)
        ev = tweedie(prior, t, x)
        if reward is None:
            return ev.score
        g = reward_grad(reward, ev.mean_hat, nonsmooth="zero")
        return ev.score + np.matmul(ev.jac_mean, g[..., None])[..., 0]

    return f


def c_u(prior, t: float, x, pot: StslPotential | None = None,
        surrogate_score: Callable | None = None, reward: RewardSpec | None = None) -> np.ndarray:
    """STSL reaction ``Delta U + grad U . grad log nu_t`` with ``U = tr Sigma_t``.

    The algorithm marginal ``nu_t`` has no closed form; its score is replaced
    by ``surrogate_score`` (default: the DPS surrogate score of ``reward``).
    The result is therefore an approximation.
    """
    if t <= 0:
        raise ValueError("c_u needs t > 0")
    pot = pot or StslPotential()
    x, single = _batch(x, prior.dim)
    s = (surrogate_score or dps_surrogate_score(prior, reward))(t, x)
    out = pot.laplacian(prior, t, x) + (pot.grad(prior, t, x) * s).sum(axis=-1)
    return out[0] if single else out


# --------------------------------------------------------------------------
# weight estimators


@dataclass
class WeightEstimate:
    """Feynman-Kac estimate of ``log omega`` at one or more points.

    ``std_error`` is the delta-method standard error of ``log_mean_weight``.
    ``normalization`` is ``absolute`` (exact ``Z_0``), ``relative`` (centred
    to zero mean log weight over the evaluated points) or ``self`` (per-path
    weights normalised over an ensemble).
    """

    log_mean_weight: np.ndarray
    std_error: np.ndarray
    n_paths: np.ndarray
    normalization: str = "absolute"
    ess: np.ndarray | None = None

    @property
    def weight(self) -> np.ndarray:
        return np.exp(self.log_mean_weight)

    @property
    def log_inverse_weight(self) -> np.ndarray:
        return -self.log_mean_weight


def _log_mean_and_se(v: np.ndarray, axis=-1):
    """``log mean exp(v)`` and the standard error of that log, ignoring NaNs."""
    v = np.asarray(v, dtype=float)
    ok = np.isfinite(v)
    n = ok.sum(axis=axis)
    vm = np.where(ok, v, -np.inf)
    m = np.max(vm, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(ok, np.exp(vm - m), 0.0)
    mean = e.sum(axis=axis) / np.maximum(n, 1)
    var = np.where(ok, (e - np.expand_dims(mean, axis)) ** 2, 0.0).sum(axis=axis) / np.maximum(n - 1, 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        lm = np.log(mean) + np.squeeze(m, axis)
        se = np.sqrt(var / np.maximum(n, 1)) / mean
        ess = e.sum(axis=axis) ** 2 / (e * e).sum(axis=axis)
    return lm, se, n, ess


def _boundary_log(prior, tilt: Tilt, T: float, z: np.ndarray) -> np.ndarray:
    """``log gamma(z) - log rho_T(z) - log h_T(z)``."""
    d = prior.dim
    lg = -0.5 * (z * z).sum(axis=-1) - 0.5 * d * np.log(2 * np.pi)
    return lg - log_density(prior, T, z) - tilt.log_h(prior, T, z)


def _forward_functional(prior, tilt: Tilt, t_offset: float = 0.0):
    def f(t_hi, x_hi, t_lo, x_lo):
        tm = t_offset + 0.5 * (t_hi + t_lo)
        return tilt.reaction(prior, tm, 0.5 * (x_hi + x_lo)) * (t_hi - t_lo)

    return f


def _forward_log_samples(prior, tilt: Tilt, x, grid: TimeGrid, n_paths: int, seed: int,
                         t_offset: float = 0.0) -> np.ndarray:
    """Per-path ``log[gamma / (h rho)(X_end)] + int c[h]`` from each start point; shape ``(m, n)``."""
    m = x.shape[0]
    x0 = np.repeat(x, n_paths, axis=0)
    ens = simulate_forward(prior, grid, x0=x0, seed=seed,
                           functionals={"c": _forward_functional(prior, tilt, t_offset)})
    v = _boundary_log(prior, tilt, t_offset + grid.T, ens.terminal) + ens.functionals["c"]
    return v.reshape(m, n_paths)


def weight_forward(prior, reward: RewardSpec | None, x, grid: TimeGrid, n_paths: int = 1000,
                   seed: int = 0, normalization: str = "auto", tilt: Tilt | None = None) -> WeightEstimate:
    """Forward-path estimate of ``omega(x)`` from OU paths started at each ``x``.

    ``1/omega(x) = Z_0 E[gamma/(h_T rho_T)(X_T) exp(int_0^T c[h](s, X_s) ds)]``
    with the path integral by the midpoint rule on ``grid``.
    ``normalization='auto'`` uses the exact ``Z_0`` when available.
    """
    tilt = tilt or Tilt(reward)
    x, single = _batch(x, prior.dim)
    v = _forward_log_samples(prior, tilt, x, grid, n_paths, seed)
    lm, se, n, ess = _log_mean_and_se(v)
    if np.any(n == 0):
        raise EstimatorError("estimator failed")
    logz = tilt.log_Z0(prior) if normalization in ("auto", "absolute") else None
    if normalization == "absolute" and logz is None:
        raise EstimatorError("absolute normalization unavailable for this prior and reward")
    if logz is not None:
        log_w = -(lm + logz)
        norm = "absolute"
    else:
        log_w = -lm
        log_w = log_w - log_w.mean()
        norm = "relative"
    out = WeightEstimate(log_w, se, n, norm, ess)
    if single:
        out = WeightEstimate(log_w[0], se[0], n[0], norm, ess[0])
    return out


def backward_functional(prior, reward: RewardSpec | None, tilt: Tilt | None = None):
    """Path functional for :func:`~dpsfk.sde.run_sampler` accumulating ``int c[h](T - s, Y_s) ds``."""
    tilt = tilt or Tilt(reward, nonsmooth="zero")

    def f(t_hi, x_hi, t_lo, x_lo):
        tm = 0.5 * (t_hi + t_lo)
        return tilt.reaction(prior, tm, 0.5 * (x_hi + x_lo)) * (t_hi - t_lo)

    return f


def path_log_weights(prior, reward: RewardSpec | None, ensemble: Ensemble, key: str = "c",
                     tilt: Tilt | None = None, absolute: bool = True) -> np.ndarray:
    """Per-path ``log[(h_T rho_T / gamma)(Y_0)] - int c[h](T - s, Y_s) ds - log Z_0``.

    Conditional on the end point these average to ``omega``.
    """
    if key not in ensemble.functionals:
        raise ValueError(f"ensemble has no path functional {key!r}; run the sampler with backward_functional")
    tilt = tilt or Tilt(reward, nonsmooth="zero")
    T = float(ensemble.times[0])
    v = -_boundary_log(prior, tilt, T, ensemble.initial) - ensemble.functionals[key]
    if absolute:
        logz = tilt.log_Z0(prior)
        if logz is not None:
            v = v - logz
    v[ensemble.diverged] = np.nan
    return v


@dataclass
class BinnedWeights:
    """Per-bin backward weight estimates; ``missing`` marks empty bins."""

    edges: list[np.ndarray]
    centers: np.ndarray
    estimate: WeightEstimate
    counts: np.ndarray
    missing: np.ndarray


def _bin_index(x: np.ndarray, edges: list[np.ndarray]):
    shape = tuple(e.size - 1 for e in edges)
    idx = np.zeros(x.shape[0], dtype=int)
    inside = np.all(np.isfinite(x), axis=-1)
    for k, e in enumerate(edges):
        j = np.searchsorted(e, x[:, k], side="right") - 1
        j = np.where(x[:, k] == e[-1], e.size - 2, j)
        inside &= (j >= 0) & (j < e.size - 1)
        idx = idx * shape[k] + np.clip(j, 0, e.size - 2)
    return idx, inside, shape


def weight_backward(prior, reward: RewardSpec | None, ensemble: Ensemble, binning=50,
                    bounds=None, key: str = "c", tilt: Tilt | None = None,
                    normalization: str = "auto") -> BinnedWeights:
    """Backward-path weights averaged over end-point bins.

    ``binning`` is a bin count (equal-mass bins in 1D, a regular grid over
    ``bounds`` in 2D) or an explicit list of edge arrays.
    """
    v = path_log_weights(prior, reward, ensemble, key, tilt, absolute=normalization != "self")
    x = ensemble.terminal
    d = x.shape[1]
    ok = np.isfinite(v) & np.all(np.isfinite(x), axis=-1)
    if not ok.any():
        raise EstimatorError("estimator failed")
    if isinstance(binning, (list, tuple)):
        edges = [np.asarray(e, dtype=float) for e in binning]
    elif d == 1:
        edges = [np.quantile(x[ok, 0], np.linspace(0, 1, int(binning) + 1))]
    else:
        if bounds is None:
            bounds = [(x[ok, k].min(), x[ok, k].max()) for k in range(d)]
        edges = [np.linspace(lo, hi, int(binning) + 1) for lo, hi in bounds]
    idx, inside, shape = _bin_index(x, edges)
    nb = int(np.prod(shape))
    sel = ok & inside
    order = np.argsort(idx[sel], kind="stable")
    vs, ids = v[sel][order], idx[sel][order]
    lm = np.full(nb, np.nan)
    se = np.full(nb, np.nan)
    ess = np.full(nb, np.nan)
    counts = np.bincount(ids, minlength=nb)
    starts = np.concatenate([[0], np.cumsum(counts)])
    for b in np.flatnonzero(counts):
        lm[b], se[b], _, ess[b] = _log_mean_and_se(vs[starts[b] : starts[b + 1]])
    missing = counts == 0
    norm = "absolute"
    if normalization == "self" or (normalization == "auto" and (tilt or Tilt(reward)).log_Z0(prior) is None):
        # normalise so that the count-weighted mean weight is one
        w = np.nansum(np.exp(lm) * counts) / counts.sum()
        lm = lm - np.log(w)
        norm = "self"
    mids = [0.5 * (e[1:] + e[:-1]) for e in edges]
    centers = np.stack(np.meshgrid(*mids, indexing="ij"), axis=-1).reshape(-1, d)
    return BinnedWeights(edges, centers, WeightEstimate(lm, se, counts, norm, ess), counts, missing)


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    s = w.sum()
    return float(s * s / (w * w).sum())


def importance_resample(samples, weights, rng: np.random.Generator, n: int | None = None):
    """Multinomial resampling; returns ``(resampled, ess)``."""
    samples = np.asarray(samples)
    w = np.asarray(weights, dtype=float)
    if w.shape[0] != samples.shape[0]:
        raise ValueError("samples and weights must have equal length")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    s = w.sum()
    if s <= 0:
        raise ValueError("all weights are zero")
    idx = rng.choice(w.size, size=n or w.size, p=w / s)
    return samples[idx], effective_sample_size(w)


# --------------------------------------------------------------------------
# early stopping


@dataclass
class EarlyStopDensity:
    """Output density with guidance stopped below noise time ``t_star``."""

    x: np.ndarray
    log_unnormalized: np.ndarray
    density: np.ndarray
    ess: np.ndarray
    t_star: float
    cell_volume: float
    warnings: list[str] = field(default_factory=list)


def _grid_volume(x: np.ndarray) -> float:
    vol = 1.0
    for k in range(x.shape[1]):
        u = np.unique(x[:, k])
        vol *= float(np.mean(np.diff(u))) if u.size > 1 else 1.0
    return vol


def early_stopping_density(
    prior,
    reward: RewardSpec,
    sched: AnnealingSchedule | None,
    t_star: float,
    x,
    grid: TimeGrid,
    n_inner: int = 256,
    n_outer: int = 4096,
    table_nodes: int = 161,
    table_width: float = 6.0,
    seed: int = 0,
) -> EarlyStopDensity:
    """Output density of a guided sampler whose guidance is off below ``t_star``.

    ``nu(x) ∝ rho_*(x) E_OU[w(X_{t*}) h_{t*}(X_{t*}) | X_0 = x]`` where ``w`` is
    the ratio of sampler to tilted marginal at ``t_star``, estimated by inner OU
    paths over the remaining grid steps.  ``t_star`` is snapped to the nearest
    grid time.  For ``t_star > 0`` the inner estimate is tabulated on a regular
    grid of ``table_nodes`` nodes per axis and ``log w + log h`` is interpolated
    linearly; the outer expectation uses ``n_outer`` exact OU-kernel draws.
    ``x`` must be a regular grid so the density can be normalised by quadrature.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, d = x.shape
    if not 0 <= t_star <= grid.T * (1 + 1e-12):
        raise ValueError("t_star outside [0, T]")
    i0 = int(np.argmin(np.abs(grid.times - t_star)))
    ts = float(grid.times[i0])
    tilt = Tilt(reward, sched)
    sub = grid.restrict(i0, grid.N) if i0 < grid.N else None
    notes = []

    def log_g(z, s):
        if sub is None:
            val = _boundary_log(prior, tilt, grid.T, z)[:, None]
        else:
            val = _forward_log_samples(prior, tilt, z, sub, n_inner, s, t_offset=ts)
        lm, _, cnt, _ = _log_mean_and_se(val)
        if np.any(cnt == 0):
            raise EstimatorError("estimator failed")
        return lm + tilt.log_h(prior, ts, z)

    log_rho = log_density(prior, 0.0, x)
    if i0 == 0:
        lg = log_g(x, seed)
        ess = np.full(n, float(n_inner))
        lu = log_rho + lg
    else:
        a = np.exp(-ts)
        sd = np.sqrt(-np.expm1(-2 * ts))
        lo, hi = a * x.min(axis=0) - table_width * sd, a * x.max(axis=0) + table_width * sd
        axes = [np.linspace(lo[k], hi[k], table_nodes) for k in range(d)]
        nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        table = log_g(nodes, seed).reshape((table_nodes,) * d)
        interp = RegularGridInterpolator(axes, table, bounds_error=False, fill_value=None)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        lu = np.empty(n)
        ess = np.empty(n)
        chunk = max(1, 2**20 // n_outer)
        for s in range(0, n, chunk):
            xs = x[s : s + chunk]
            z = a * xs[:, None, :] + sd * rng.standard_normal((xs.shape[0], n_outer, d))
            lv = interp(z.reshape(-1, d)).reshape(xs.shape[0], n_outer)
            lm, _, _, es = _log_mean_and_se(lv)
            lu[s : s + chunk] = lm
            ess[s : s + chunk] = es
        lu = lu + log_rho
    vol = _grid_volume(x)
    m = np.max(lu)
    dens = np.exp(lu - m)
    dens /= dens.sum() * vol
    low = np.nanmin(ess) / (n_outer if i0 else n_inner)
    if low < ESS_WARN:
        msg = f"effective sample size fraction {low:.3g} below {ESS_WARN}"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
    return EarlyStopDensity(x, lu, dens, ess, ts, vol, notes)
