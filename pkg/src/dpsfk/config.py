"""Experiment configuration: JSON schema, validation and object builders."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import jsonschema
import numpy as np

from .priors import GaussianMixturePrior, RingPrior, four_mode_prior
from .rewards import RewardSpec, band_reward
from .schedules import AnnealingSchedule, DdpmSchedule, TimeGrid, build_time_grid
from .sde import SamplerConfig, ZetaMode

__all__ = [
    "EXPERIMENTS",
    "SCHEMA",
    "ConfigError",
    "load_config",
    "validate_config",
    "config_hash",
    "build_prior",
    "build_reward",
    "build_grid",
    "build_annealing",
    "build_sampler",
]

EXPERIMENTS = {
    "sample": "Run a reverse sampler; ensemble CSV and summary with TV to the target grid density.",
    "weight-map": "Forward Feynman-Kac weights at grid points; over/under-sampling map in 2D.",
    "reweight": "Guided ensemble with backward path weights, importance resampling and TV to the posterior.",
    "early-stop": "Output density of a sampler with guidance switched off below t_star, against sampled histograms.",
    "instability": "Sign-flow cycle, step alignment, stability margins and squared vs unsquared divergence.",
    "schedule-table": "DDPM variances, OU times, step sizes and annealing weights per step.",
    "oracle": "Grid quadrature of the reward-tilted prior with normalization checks.",
}

_num = {"type": "number"}
_vec = {"type": "array", "items": _num, "minItems": 1}
_mat = {"type": "array", "items": _vec, "minItems": 1}

SCHEMA = {
    "type": "object",
    "required": ["experiment", "prior"],
    "properties": {
        "experiment": {"enum": list(EXPERIMENTS)},
        "name": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "prior": {
            "type": "object",
            "required": ["type"],
            "properties": {
                "type": {"enum": ["gmm", "four_mode", "standard_normal", "ring"]},
                "weights": _vec,
                "means": _mat,
                "covs": {"type": "array", "items": _mat},
                "layout": {"enum": ["diamond", "corners"]},
                "dim": {"type": "integer", "minimum": 1},
                "center": _vec,
                "radius": _num,
            },
        },
        "reward": {
            "type": "object",
            "required": ["type"],
            "properties": {
                "type": {"enum": ["none", "quadratic", "unsquared", "linear", "band"]},
                "A": _mat,
                "y": _vec,
                "lam": _num,
                "alpha": _num,
                "b": _vec,
            },
        },
        "schedule": {
            "type": "object",
            "properties": {
                "beta_min": _num,
                "beta_max": _num,
                "N": {"type": "integer", "minimum": 1},
                "uniform_T": _num,
            },
        },
        "annealing": {
            "type": "object",
            "properties": {
                "mode": {"enum": ["exact_inverse_dt", "closed_form", "constant"]},
                "alpha": _num,
                "eta0": _num,
            },
        },
        "sampler": {
            "type": "object",
            "properties": {
                "guidance": {"enum": ["none", "dps_continuous", "dps_discrete", "stsl"]},
                "paths": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "i_stop": {"type": "integer", "minimum": 0},
                "r": {"type": "number", "minimum": 0},
                "integrator": {"enum": ["ddpm", "em"]},
                "variance": {"enum": ["posterior", "moment"]},
                "record": {"enum": ["terminal", "states", "full"]},
                "zeta": {
                    "type": "object",
                    "properties": {
                        "mode": {"enum": ["constant", "trajectory"]},
                        "alpha": _num,
                        "constant": _num,
                    },
                },
            },
        },
        "params": {"type": "object"},
    },
}


class ConfigError(ValueError):
    """Unreadable or schema-invalid configuration (exit status 2)."""


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"unreadable config: {exc}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from exc
    validate_config(cfg)
    return cfg


def validate_config(cfg) -> dict:
    """Raise :class:`ConfigError` naming the offending key; returns a report."""
    v = jsonschema.Draft7Validator(SCHEMA)
    errs = sorted(v.iter_errors(cfg), key=lambda e: list(e.path))
    if errs:
        e = errs[0]
        where = "/".join(str(p) for p in e.path) or "<root>"
        if e.validator == "required":
            missing = [k for k in e.validator_value if k not in e.instance]
            raise ConfigError(f"missing required key {missing[0]!r} at {where}")
        raise ConfigError(f"invalid value at {where}: {e.message}")
    return {"valid": True, "experiment": cfg["experiment"]}


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def build_prior(spec: dict):
    kind = spec["type"]
    if kind == "four_mode":
        return four_mode_prior(spec.get("layout", "diamond"))
    if kind == "standard_normal":
        return GaussianMixturePrior.standard_normal(int(spec.get("dim", 1)))
    if kind == "ring":
        return RingPrior(np.asarray(spec.get("center", [0.0, 0.0])), float(spec.get("radius", 1.0)))
    for key in ("weights", "means", "covs"):
        if key not in spec:
            raise ConfigError(f"missing required key {key!r} at prior")
    return GaussianMixturePrior(np.asarray(spec["weights"], float), np.asarray(spec["means"], float),
                                np.asarray(spec["covs"], float))


def build_reward(spec: dict | None) -> RewardSpec | None:
    if spec is None or spec["type"] == "none":
        return None
    kind = spec["type"]
    if kind == "band":
        return band_reward()
    if kind == "linear":
        if "b" not in spec:
            raise ConfigError("missing required key 'b' at reward")
        return RewardSpec.linear(np.asarray(spec["b"], float))
    for key in ("A", "y"):
        if key not in spec:
            raise ConfigError(f"missing required key {key!r} at reward")
    A, y = np.asarray(spec["A"], float), np.asarray(spec["y"], float)
    if kind == "quadratic":
        return RewardSpec.quadratic(A, y, float(spec.get("lam", 1.0)))
    return RewardSpec.unsquared(A, y, float(spec.get("alpha", 1.0)))


def build_grid(spec: dict | None) -> TimeGrid:
    spec = spec or {}
    if "uniform_T" in spec:
        return TimeGrid.uniform(float(spec["uniform_T"]), int(spec.get("N", 1000)))
    return build_time_grid(DdpmSchedule(float(spec.get("beta_min", 1e-4)), float(spec.get("beta_max", 0.02)),
                                        int(spec.get("N", 1000))))


def build_annealing(spec: dict | None, grid: TimeGrid) -> AnnealingSchedule | None:
    if spec is None:
        return None
    return AnnealingSchedule(float(spec.get("alpha", 1.0)), spec.get("mode", "exact_inverse_dt"), grid,
                             float(spec.get("eta0", 1.0)))


def build_sampler(cfg: dict, grid: TimeGrid, **overrides) -> SamplerConfig:
    s = copy.deepcopy(cfg.get("sampler", {}))
    z = s.get("zeta", {})
    if z.get("mode", "constant") == "trajectory":
        zm = ZetaMode.trajectory(float(z.get("alpha", 0.5)))
    else:
        zm = ZetaMode.constant(float(z.get("constant", 1.0)))
    kw = dict(
        grid=grid,
        guidance=s.get("guidance", "none"),
        zeta=zm,
        integrator=s.get("integrator", "ddpm"),
        variance=s.get("variance", "posterior"),
        stsl_strength=float(s.get("r", 0.0)),
        i_stop=int(s.get("i_stop", 0)),
        seed=int(s.get("seed", cfg.get("seed", 0))),
        n_paths=int(s.get("paths", 1000)),
        record=s.get("record", "terminal"),
    )
    kw.update(overrides)
    return SamplerConfig(**kw)
