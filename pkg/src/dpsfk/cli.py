"""Command-line experiment runner: ``dpsfk run|validate|list``."""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import time
import warnings
from importlib import metadata
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from . import diagnostics as dg
from .config import (
    EXPERIMENTS,
    ConfigError,
    build_annealing,
    build_grid,
    build_prior,
    build_reward,
    build_sampler,
    config_hash,
    load_config,
    validate_config,
)
from .feynman_kac import (
    EstimatorError,
    backward_functional,
    early_stopping_density,
    importance_resample,
    path_log_weights,
    weight_backward,
)
from .priors import PriorError
from .schedules import AnnealingSchedule, closed_form_index, dt_closed_form, eta, invert_time
from .sde import run_sampler
from .serialize import ensemble_columns, sha256_file, write_csv, write_json

__all__ = ["main", "run", "list_experiments", "OUTPUT_ROOT_ENV"]

OUTPUT_ROOT_ENV = "DPSFK_OUTPUT_ROOT"

EXIT_OK, EXIT_CONFIG, EXIT_ESTIMATOR = 0, 2, 3


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def list_experiments() -> list[dict]:
    return [{"kind": k, "description": v} for k, v in EXPERIMENTS.items()]


class _Outputs:
    """Tracks written files and their column schemas for the manifest."""

    def __init__(self, root: Path):
        self.root = root
        self.files: dict[str, dict] = {}

    def csv(self, name: str, columns: dict) -> Path:
        p = write_csv(self.root / name, columns)
        self.files[name] = {"columns": list(columns)}
        return p

    def ensemble(self, name: str, ens) -> Path:
        return self.csv(name, ensemble_columns(ens))

    def json(self, name: str, obj) -> Path:
        p = write_json(self.root / name, obj)
        self.files[name] = {"columns": None}
        return p

    def checksums(self) -> dict:
        return {k: dict(v, sha256=sha256_file(self.root / k)) for k, v in sorted(self.files.items())}


# --------------------------------------------------------------------------
# helpers


def _bounds(params: dict, d: int) -> list[tuple[float, float]]:
    b = params.get("bounds", [[-6.0, 6.0]] * d)
    if len(b) != d:
        raise ConfigError("missing required key 'bounds' matching the prior dimension at params")
    return [(float(lo), float(hi)) for lo, hi in b]


def _quiet_oracle(prior, reward, bounds, res, check=True):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return dg.grid_posterior(prior, reward, bounds, res, check=check)


def _grid_points(bounds, res) -> np.ndarray:
    axes = [np.linspace(lo, hi, n + 1) for (lo, hi), n in zip(bounds, res)]
    axes = [0.5 * (a[1:] + a[:-1]) for a in axes]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(bounds))


def _xcols(x: np.ndarray) -> dict:
    return {f"x{k + 1}": x[:, k] for k in range(x.shape[1])}


def _resolution(params: dict, d: int, key: str = "resolution", default: int = 100) -> tuple[int, ...]:
    r = params.get(key, default)
    return tuple(int(v) for v in (r if isinstance(r, list) else [r] * d))


# --------------------------------------------------------------------------
# experiments


def _exp_sample(cfg, out: _Outputs, ctx) -> dict:
    prior, reward, grid = ctx["prior"], ctx["reward"], ctx["grid"]
    scfg = build_sampler(cfg, grid)
    if scfg.guidance != "none" and reward is None:
        raise ConfigError("missing required key 'reward' for guided sampling")
    ens = run_sampler(scfg, prior, reward)
    out.ensemble("ensemble.csv", ens)
    summary = {"sampler": ens.summary()}
    params = cfg.get("params", {})
    if prior.dim <= 2 and params.get("tv", True):
        bounds = _bounds(params, prior.dim)
        res = _resolution(params, prior.dim, "bins", 100 if prior.dim == 1 else 60)
        target = None if scfg.guidance == "none" else reward
        oracle = _quiet_oracle(prior, target, bounds, res, check=False)
        tv = dg.tv_distance(dg.histogram(ens.terminal, oracle.edges), oracle)
        summary["tv_to_prior" if target is None else "tv_to_posterior"] = tv
    return summary


def _exp_oracle(cfg, out: _Outputs, ctx) -> dict:
    prior, reward = ctx["prior"], ctx["reward"]
    params = cfg.get("params", {})
    bounds = _bounds(params, prior.dim)
    res = _resolution(params, prior.dim, default=200)
    oracle = _quiet_oracle(prior, reward, bounds, res, check=True)
    pts = oracle.points()
    out.csv("posterior_grid.csv", {**_xcols(pts), "density": oracle.values.ravel(), "mass": oracle.cell_mass().ravel()})
    return {
        "normalization": {
            "total_mass": float(oracle.cell_mass().sum()),
            "outside_mass_below": 1e-6,
            "richardson_tv": oracle.richardson_tv,
        },
        "cell_volume": oracle.cell_volume,
    }


def _exp_weight_map(cfg, out: _Outputs, ctx) -> dict:
    prior, reward, grid = ctx["prior"], ctx["reward"], ctx["grid"]
    params = cfg.get("params", {})
    d = prior.dim
    bounds = _bounds(params, d)
    res = _resolution(params, d, default=21 if d == 2 else 41)
    pts = _grid_points(bounds, res)
    n_paths = int(params.get("paths_per_point", cfg.get("sampler", {}).get("paths", 200)))
    mask = None
    if d <= 2:
        ores = tuple(max(50, r) for r in res)
        oracle = _quiet_oracle(prior, reward, bounds, ores, check=False)
        dens = RegularGridInterpolator(oracle.axes, oracle.values, bounds_error=False, fill_value=None)(pts)
        mask = dens >= float(params.get("min_relative_density", 1e-4)) * oracle.values.max()
    m = dg.over_under_map(prior, reward, pts, grid, n_paths=n_paths, seed=ctx["seed"], mask=mask,
                          normalization=params.get("normalization", "auto"))
    out.csv("weights.csv", {**_xcols(pts), "log_weight": -m.log_inv_omega, "std_error": m.std_error,
                            "n": np.where(m.computed, n_paths, 0)})
    summary = {"computed_points": int(m.computed.sum()), "points": int(pts.shape[0]), "normalization": m.normalization}
    if d == 2:
        out.csv("over_under.csv", {"x1": pts[:, 0], "x2": pts[:, 1], "log_inv_omega": m.log_inv_omega,
                                   "stderr": m.std_error, "computed_flag": m.computed.astype(int)})
    if not m.computed.any():
        raise EstimatorError("estimator failed at every point")
    return summary


def _exp_reweight(cfg, out: _Outputs, ctx) -> dict:
    prior, reward, grid = ctx["prior"], ctx["reward"], ctx["grid"]
    if reward is None:
        raise ConfigError("missing required key 'reward' for reweighting")
    params = cfg.get("params", {})
    overrides = {} if cfg.get("sampler", {}).get("guidance") else {"guidance": "dps_continuous"}
    scfg = build_sampler(cfg, grid, **overrides)
    ens = run_sampler(scfg, prior, reward, functionals={"c": backward_functional(prior, reward)})
    lw = path_log_weights(prior, reward, ens)
    ok = np.isfinite(lw)
    if not ok.any():
        raise EstimatorError("estimator failed")
    w = np.where(ok, np.exp(lw - np.max(lw[ok])), 0.0)
    rng = np.random.default_rng(np.random.SeedSequence([ctx["seed"], 7]))
    res_x, ess = importance_resample(ens.terminal, w, rng)
    out.csv("path_weights.csv", {"path_id": np.arange(ens.n_paths), **_xcols(ens.terminal), "log_weight": lw})
    bw = weight_backward(prior, reward, ens, binning=int(params.get("bins", 50)),
                         bounds=_bounds(params, prior.dim) if prior.dim == 2 else None)
    centers = np.atleast_2d(bw.centers)
    if centers.shape[0] == 1 and prior.dim == 1:
        centers = centers.T
    est = bw.estimate
    out.csv("binned_weights.csv", {**_xcols(centers), "log_weight": np.ravel(est.log_mean_weight),
                                   "std_error": np.ravel(est.std_error), "n": np.ravel(bw.counts).astype(int)})
    summary = {"sampler": ens.summary(), "ess": ess, "ess_fraction": ess / ens.n_paths,
               "normalization": est.normalization}
    if prior.dim <= 2:
        bounds = _bounds(params, prior.dim)
        res = _resolution(params, prior.dim, "tv_bins", 100 if prior.dim == 1 else 60)
        oracle = _quiet_oracle(prior, reward, bounds, res, check=False)
        summary["tv_raw"] = dg.tv_distance(dg.histogram(ens.terminal, oracle.edges), oracle)
        summary["tv_reweighted"] = dg.tv_distance(dg.histogram(ens.terminal, oracle.edges, weights=w), oracle)
        summary["tv_resampled"] = dg.tv_distance(dg.histogram(res_x, oracle.edges), oracle)
    return summary


def _exp_early_stop(cfg, out: _Outputs, ctx) -> dict:
    prior, reward, grid = ctx["prior"], ctx["reward"], ctx["grid"]
    params = cfg.get("params", {})
    sched = ctx["annealing"] or AnnealingSchedule(mode="constant", eta0=1.0)
    if sched.mode != "constant":
        warnings.warn("sampler histograms assume constant annealing; comparison is informational", RuntimeWarning)
    i_stop = int(params.get("i_stop", cfg.get("sampler", {}).get("i_stop", grid.N // 2)))
    bounds = _bounds(params, prior.dim)
    res = _resolution(params, prior.dim, default=100)
    pts = _grid_points(bounds, res)
    est = early_stopping_density(prior, reward, sched, float(grid.times[i_stop]), pts, grid,
                                 n_inner=int(params.get("n_inner", 256)), n_outer=int(params.get("n_outer", 4096)),
                                 seed=ctx["seed"])
    out.csv("density.csv", {**_xcols(pts), "density": est.density, "ess": est.ess})
    summary = {"t_star": est.t_star, "i_stop": i_stop, "warnings": est.warnings,
               "ess_fraction_min": float(np.min(est.ess)) / (int(params.get("n_outer", 4096)) if i_stop else
                                                            int(params.get("n_inner", 256)))}
    n_hist = int(params.get("histogram_paths", cfg.get("sampler", {}).get("paths", 0)))
    if n_hist and sched.mode == "constant":
        r = reward.scaled(sched.eta0) if reward is not None else None
        over = {"guidance": cfg.get("sampler", {}).get("guidance", "dps_continuous"), "i_stop": i_stop,
                "n_paths": n_hist}
        if over["guidance"] == "none":
            over["guidance"] = "dps_continuous"
        ens = run_sampler(build_sampler(cfg, grid, **over), prior, r)
        oracle = dg.GridOracle(list(bounds), res, est.density.reshape(res))
        h = dg.histogram(ens.terminal, oracle.edges)
        out.csv("histogram.csv", {**_xcols(pts), "density": h.values.ravel(), "count": h.counts.ravel().astype(int)})
        summary["tv_to_sampler_histogram"] = dg.tv_distance(h, oracle)
        summary["histogram_paths"] = n_hist
    return summary


def _exp_instability(cfg, out: _Outputs, ctx) -> dict:
    prior, reward, grid = ctx["prior"], ctx["reward"], ctx["grid"]
    params = cfg.get("params", {})
    sf = params.get("sign_flow", {})
    demo = dg.sign_flow_demo(sf.get("x0", 0.35), sf.get("dt", 0.1), int(sf.get("n_steps", 50)))
    x0s = sf.get("sweep_x0", 0.33)
    dts = [float(v) for v in sf.get("sweep_dt", [0.2, 0.1, 0.05, 0.025])]
    amps = [dg.sign_flow_demo(x0s, h, int(sf.get("sweep_steps", 400))).amplitude for h in dts]
    slope = float(np.polyfit(np.log(dts), np.log(amps), 1)[0]) if all(a and a > 0 for a in amps) else None
    out.csv("sign_flow.csv", {"step": np.arange(demo.series.size), "x": demo.series})
    summary = {"sign_flow": {"cycle": list(demo.cycle), "period": demo.period, "amplitude": demo.amplitude,
                             "sweep_dt": dts, "sweep_amplitude": amps, "sweep_x0": x0s, "slope": slope}}
    if reward is None:
        return summary
    runs = int(params.get("runs", 100))
    window, top_k, tail = int(params.get("window", 50)), int(params.get("top_k", 10)), int(params.get("tail", 25))
    i_early = int(params.get("i_stop_early", grid.N // 10))
    base = {"guidance": "dps_discrete", "n_paths": runs, "record": "states"}
    ens = run_sampler(build_sampler(cfg, grid, i_stop=0, **base), prior, reward)
    ens_e = run_sampler(build_sampler(cfg, grid, i_stop=i_early, **base), prior, reward)
    tail_a, tail_e, fv, on = [], [], [], []
    for j in range(runs):
        a = dg.oscillation_alpha(ens.states[j], window, top_k)
        tail_a.append(a.tail_mean(tail))
        tail_e.append(dg.oscillation_alpha(ens_e.states[j], window, top_k).tail_mean(tail))
        o = dg.collapse_onset(a)
        f = dg.trajectory_stability(prior, reward, ens.states[j], grid).first_violation()
        on.append(-1 if o is None else o)
        fv.append(-1 if f is None else f)
    tail_a, tail_e, fv, on = map(np.asarray, (tail_a, tail_e, fv, on))
    out.csv("alignment.csv", {"run": np.arange(runs), "tail_alpha": tail_a, "tail_alpha_early_stop": tail_e,
                              "first_violation": fv, "collapse_onset": on})
    prec = (fv >= 0) & (on >= 0) & (fv < on)
    st = params.get("study", {})
    study = dg.squared_vs_unsquared_study(prior, reward.A, reward.y, grid, n_paths=int(st.get("paths", runs)),
                                          seed=ctx["seed"], zeta_large=float(st.get("zeta_large", 5.0)),
                                          zeta_small=float(st.get("zeta_small", 1e-3)),
                                          alpha=float(st.get("alpha", 0.5)))
    summary.update({
        "runs": runs,
        "i_stop_early": i_early,
        "fraction_collapsed": float(np.mean(tail_a <= -0.5)),
        "fraction_early_stop_uncorrelated": float(np.mean(np.abs(tail_e) <= 0.25)),
        "fraction_violation_precedes_collapse": float(np.mean(prec)),
        "study": study,
    })
    return summary


def _exp_schedule_table(cfg, out: _Outputs, ctx) -> dict:
    grid = ctx["grid"]
    t = grid.times
    ex = AnnealingSchedule(mode="exact_inverse_dt", grid=grid)
    pc = AnnealingSchedule(mode="closed_form")
    tt = t[1:]
    dtc = dt_closed_form(tt)
    eta_ex, eta_pc = eta(ex, tt), eta(pc, tt)
    out.csv("schedule.csv", {"i": np.arange(1, grid.N + 1), "beta": grid.betas, "dt": grid.dt, "t": tt,
                             "dt_closed_form": dtc, "eta_exact": eta_ex, "eta_closed_form": eta_pc,
                             "index_closed_form": closed_form_index(tt), "index_inverted": invert_time(grid, tt)})
    win = (tt >= 0.01) & (tt <= 2.5)
    late = tt >= 0.25
    rel = np.abs(dtc - grid.dt) / grid.dt
    ratio = eta_pc / eta_ex
    return {"T": grid.T, "N": grid.N,
            "dt_closed_form_max_rel_error": float(rel[win].max()) if win.any() else None,
            "eta_ratio_range_t_ge_0.25": [float(ratio[late].min()), float(ratio[late].max())] if late.any() else None,
            "eta_ratio_range_t_lt_0.25": [float(ratio[~late].min()), float(ratio[~late].max())] if (~late).any() else None}


_DISPATCH = {
    "sample": _exp_sample,
    "weight-map": _exp_weight_map,
    "reweight": _exp_reweight,
    "early-stop": _exp_early_stop,
    "instability": _exp_instability,
    "schedule-table": _exp_schedule_table,
    "oracle": _exp_oracle,
}


# --------------------------------------------------------------------------
# runner


def _apply_overrides(cfg: dict, seed=None, paths=None, out=None) -> dict:
    cfg = copy.deepcopy(cfg)
    if seed is not None:
        cfg["seed"] = int(seed)
        cfg.setdefault("sampler", {})["seed"] = int(seed)
    if paths is not None:
        cfg.setdefault("sampler", {})["paths"] = int(paths)
    if out is not None:
        cfg["output_dir"] = str(out)
    return cfg


def _output_dir(cfg: dict, cli_out) -> Path:
    if cli_out is not None:
        return Path(cli_out)
    rel = Path(cfg.get("output_dir", f"runs/{cfg.get('name', cfg['experiment'])}"))
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return Path(root) / rel if root and not rel.is_absolute() else rel


def run(config_path, seed=None, paths=None, out=None) -> int:
    """Run one experiment; returns the process exit status."""
    start = time.perf_counter()
    try:
        cfg = load_config(config_path)
        cfg = _apply_overrides(cfg, seed, paths)
        out_dir = _output_dir(cfg, out)
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_test"
        probe.write_text("")
        probe.unlink()
        prior = build_prior(cfg["prior"])
        grid = build_grid(cfg.get("schedule"))
        ctx = {"prior": prior, "reward": build_reward(cfg.get("reward")), "grid": grid,
               "annealing": build_annealing(cfg.get("annealing"), grid), "seed": int(cfg.get("seed", 0))}
    except (ConfigError, OSError, ValueError) as exc:
        _emit_error("config", exc)
        return EXIT_CONFIG
    outputs = _Outputs(out_dir)
    status, err, summary = EXIT_OK, None, {}
    try:
        summary = _DISPATCH[cfg["experiment"]](cfg, outputs, ctx)
    except ConfigError as exc:
        _emit_error("config", exc)
        return EXIT_CONFIG
    except (EstimatorError, dg.BoundsError, PriorError, FloatingPointError) as exc:
        status, err = EXIT_ESTIMATOR, {"kind": "estimator", "message": str(exc)}
    summary = {"experiment": cfg["experiment"], "status": "ok" if err is None else "partial", **summary}
    if err is not None:
        summary["error"] = err
    outputs.json("summary.json", summary)
    manifest = {
        "experiment": cfg["experiment"],
        "config_hash": config_hash(cfg),
        "seed": ctx["seed"],
        "version": _version(),
        "outputs": outputs.checksums(),
        "partial": err is not None,
        "wall_clock_seconds": time.perf_counter() - start,
    }
    write_json(out_dir / "manifest.json", manifest)
    if err is not None:
        print(json.dumps({"error": err, "outputs_partial": sorted(outputs.files)}), file=sys.stdout)
    return status


def _emit_error(kind: str, exc: Exception):
    print(json.dumps({"error": {"kind": kind, "message": str(exc)}}), file=sys.stdout)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="dpsfk", description="Guided diffusion sampling and path-weight experiments.")
    sub = ap.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--seed", type=int)
    r.add_argument("--paths", type=int)
    r.add_argument("--out")
    v = sub.add_parser("validate", help="check a config against the schema")
    v.add_argument("config")
    sub.add_parser("list", help="list experiment kinds")
    args = ap.parse_args(argv)
    if args.cmd == "list":
        print(json.dumps(list_experiments(), indent=2))
        return EXIT_OK
    if args.cmd == "validate":
        try:
            report = validate_config(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            _emit_error("config", ConfigError(f"unreadable config: {exc}"))
            return EXIT_CONFIG
        except ConfigError as exc:
            _emit_error("config", exc)
            return EXIT_CONFIG
        print(json.dumps(report))
        return EXIT_OK
    return run(args.config, seed=args.seed, paths=args.paths, out=args.out)


if __name__ == "__main__":
    sys.exit(main())
