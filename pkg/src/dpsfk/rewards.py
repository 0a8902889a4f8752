"""Reward models ``R_y`` and the DPS guidance field built on Tweedie quantities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .priors import TweedieEval, tweedie

__all__ = [
    "LinearMeasurement",
    "RewardSpec",
    "NonsmoothPointError",
    "reward_value",
    "reward_grad",
    "reward_hess",
    "nonsmooth_mask",
    "guidance_vector",
    "guidance_from_tweedie",
    "band_reward",
]

KINDS = ("quadratic", "unsquared", "linear")
NONSMOOTH_TOL = 1e-300


class NonsmoothPointError(ValueError):
    pass


@dataclass(frozen=True)
class LinearMeasurement:
    A: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        y = np.atleast_1d(np.asarray(self.y, dtype=float))
        if A.shape[0] != y.size:
            raise ValueError("operator rows must match observation length")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(y))):
            raise ValueError("measurement entries must be finite")
        A.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "y", y)


@dataclass(frozen=True)
class RewardSpec:
    """One of three reward families.

    * ``quadratic``: ``-lam |A x - y|^2``
    * ``unsquared``: ``-alpha |A x - y|``
    * ``linear``: ``b . x``
    """

    kind: str
    measurement: LinearMeasurement | None = None
    lam: float = 1.0
    alpha: float = 1.0
    b: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown reward kind {self.kind!r}")
        if self.kind == "linear":
            if self.b is None:
                raise ValueError("linear reward needs b")
            b = np.atleast_1d(np.asarray(self.b, dtype=float))
            if not np.all(np.isfinite(b)):
                raise ValueError("b must be finite")
            b.setflags(write=False)
            object.__setattr__(self, "b", b)
        else:
            if self.measurement is None:
                raise ValueError(f"{self.kind} reward needs a measurement")
            if self.kind == "quadratic" and not self.lam > 0:
                raise ValueError("quadratic reward needs lam > 0")
            if self.kind == "unsquared" and not self.alpha > 0:
                raise ValueError("unsquared reward needs alpha > 0")

    @classmethod
    def quadratic(cls, A, y, lam: float) -> "RewardSpec":
        return cls("quadratic", LinearMeasurement(A, y), lam=lam)

    @classmethod
    def unsquared(cls, A, y, alpha: float = 1.0) -> "RewardSpec":
        return cls("unsquared", LinearMeasurement(A, y), alpha=alpha)

    @classmethod
    def linear(cls, b) -> "RewardSpec":
        return cls("linear", b=b)

    @property
    def A(self) -> np.ndarray:
        return self.measurement.A

    @property
    def y(self) -> np.ndarray:
        return self.measurement.y

    def scaled(self, c: float) -> "RewardSpec":
        """The reward ``c * R`` (``c > 0``) in the same family."""
        if self.kind == "linear":
            return RewardSpec.linear(c * self.b)
        if self.kind == "quadratic":
            return RewardSpec("quadratic", self.measurement, lam=c * self.lam)
        return RewardSpec("unsquared", self.measurement, alpha=c * self.alpha)

    def residual(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x @ self.A.T - self.y


def _batch(x):
    x = np.asarray(x, dtype=float)
    return np.atleast_2d(x), x.ndim == 1


def reward_value(spec: RewardSpec, x) -> np.ndarray:
    x, single = _batch(x)
    if spec.kind == "linear":
        out = x @ spec.b
    else:
        r = spec.residual(x)
        if spec.kind == "quadratic":
            out = -spec.lam * np.einsum("nl,nl->n", r, r)
        else:
            out = -spec.alpha * np.linalg.norm(r, axis=-1)
    return out[0] if single else out


def nonsmooth_mask(spec: RewardSpec, x) -> np.ndarray:
    """True where the unsquared reward has no gradient (zero residual)."""
    x, single = _batch(x)
    if spec.kind != "unsquared":
        out = np.zeros(x.shape[0], dtype=bool)
    else:
        out = np.linalg.norm(spec.residual(x), axis=-1) <= NONSMOOTH_TOL
    return out[0] if single else out


def reward_grad(spec: RewardSpec, x, nonsmooth: str = "raise") -> np.ndarray:
    """Gradient of the reward. ``nonsmooth='zero'`` zeros the kink instead of raising."""
    x, single = _batch(x)
    if spec.kind == "linear":
        out = np.broadcast_to(spec.b, x.shape).copy()
    else:
        r = spec.residual(x)
        if spec.kind == "quadratic":
            out = -2.0 * spec.lam * r @ spec.A
        else:
            nrm = np.linalg.norm(r, axis=-1)
            bad = nrm <= NONSMOOTH_TOL
            if bad.any() and nonsmooth == "raise":
                raise NonsmoothPointError("nonsmooth point")
            safe = np.where(bad, 1.0, nrm)
            out = -spec.alpha * (r @ spec.A) / safe[:, None]
            out[bad] = 0.0
    return out[0] if single else out


def reward_hess(spec: RewardSpec, x, nonsmooth: str = "raise") -> np.ndarray:
    x, single = _batch(x)
    n, d = x.shape
    if spec.kind == "linear":
        out = np.zeros((n, d, d))
    elif spec.kind == "quadratic":
        out = np.broadcast_to(-2.0 * spec.lam * spec.A.T @ spec.A, (n, d, d)).copy()
    else:
        r = spec.residual(x)
        nrm = np.linalg.norm(r, axis=-1)
        bad = nrm <= NONSMOOTH_TOL
        if bad.any() and nonsmooth == "raise":
            raise NonsmoothPointError("nonsmooth point")
        safe = np.where(bad, 1.0, nrm)
        Ar = r @ spec.A  # A^T r
        AtA = spec.A.T @ spec.A
        out = -spec.alpha * (AtA[None] - np.einsum("ni,nj->nij", Ar, Ar) / safe[:, None, None] ** 2)
        out /= safe[:, None, None]
        out[bad] = 0.0
    return out[0] if single else out


def guidance_from_tweedie(spec: RewardSpec, ev: TweedieEval, nonsmooth: str = "raise") -> np.ndarray:
    """``2 grad_x R(xhat_t(x)) = 2 (grad xhat_t) grad R(xhat_t)``."""
    g = reward_grad(spec, ev.mean_hat, nonsmooth=nonsmooth)
    return 2.0 * np.matmul(ev.jac_mean, g[..., None])[..., 0]


def guidance_vector(spec: RewardSpec, prior, t: float, x, nonsmooth: str = "raise") -> np.ndarray:
    """DPS guidance drift ``(2 / (e^t - e^{-t})) Sigma_t(x) grad R(xhat_t(x))``."""
    return guidance_from_tweedie(spec, tweedie(prior, t, x), nonsmooth=nonsmooth)


def band_reward() -> RewardSpec:
    """``R(x) = -2 |A x - y|^2`` with ``A(x1, x2) = (0, x2)`` and ``y = (0, -2.5)``."""
    return RewardSpec.quadratic(np.array([[0.0, 0.0], [0.0, 1.0]]), np.array([0.0, -2.5]), lam=2.0)
