"""Acceptance criteria 1-9, each at its stated tolerance.

Every test prints one ``CRITERION k: PASS|FAIL`` line with the measured
numbers before asserting, so the report survives in the pytest log even
when a criterion fails.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from dpsfk.cli import run as cli_run
from dpsfk.diagnostics import (
    collapse_onset,
    grid_posterior,
    histogram,
    histogram_ratio_map,
    oscillation_alpha,
    over_under_map,
    sign_flow_demo,
    squared_vs_unsquared_study,
    trajectory_stability,
    tv_distance,
)
from dpsfk.feynman_kac import (
    Tilt,
    backward_functional,
    c_dps_spectral,
    c_tilde,
    early_stopping_density,
    path_log_weights,
    reaction_fd,
    weight_backward,
    weight_forward,
)
from dpsfk.priors import GaussianMixturePrior, four_mode_prior, log_density, score, score_jacobian, tweedie
from dpsfk.rewards import RewardSpec, band_reward
from dpsfk.schedules import (
    AnnealingSchedule,
    DdpmSchedule,
    beta_to_dt,
    build_time_grid,
    dt_closed_form,
    eta,
    invert_time,
)
from dpsfk.sde import SamplerConfig, ZetaMode, run_sampler

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture(scope="module")
def grid():
    return build_time_grid(DdpmSchedule())


def _report(capsys, k, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {k}: {'PASS' if ok else 'FAIL'} | {detail}")
    assert ok, detail


def _fd(f, x, h):
    out = np.zeros(x.shape)
    for k in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[k] = h
        out[..., k] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def _kbe_residual(prior, t, x, h=1e-4):
    xh = lambda tt, z: tweedie(prior, tt, z).mean_hat
    dt = (xh(t + h, x) - xh(t - h, x)) / (2 * h)
    c = xh(t, x)
    lap = np.zeros_like(x)
    for k in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[k] = h
        lap += (xh(t, x + e) - 2 * c + xh(t, x - e)) / h**2
    ev = tweedie(prior, t, x)
    return dt - lap - np.einsum("nij,nj->ni", ev.jac_mean, x + 2 * ev.score)


# ---------------------------------------------------------------- 1


def test_criterion_1_tweedie(gmm2d, capsys):
    start = time.perf_counter()
    x = np.random.default_rng(0).normal(0, 2, (50, 2))
    s_err = h_err = hess_res = kbe = 0.0
    for t in (0.05, 0.3, 1.0, 2.5):
        s = score(gmm2d, t, x)
        fd = _fd(lambda z: log_density(gmm2d, t, z), x, 1e-4)
        s_err = max(s_err, np.max(np.abs(fd - s) / np.maximum(np.abs(s), 1e-2)))
        H = score_jacobian(gmm2d, t, x)
        fdh = np.stack([_fd(lambda z: score(gmm2d, t, z)[:, i], x, 1e-4) for i in range(2)], axis=1)
        h_err = max(h_err, np.max(np.abs(fdh - H) / np.maximum(np.abs(H), 1e-2)))
        ev = tweedie(gmm2d, t, x)
        sc = 2 * np.sinh(t)
        hess_res = max(hess_res, np.max(np.abs(ev.cov_hat - (sc**2 * ev.score_jacobian + sc * np.exp(t) * np.eye(2)))))
        kbe = max(kbe, np.max(np.abs(_kbe_residual(gmm2d, t, x))))
    # N(0, I): xhat = e^{-t} x, J = e^{-t} I, score = -x, so d_t xhat - lap xhat - J (x + 2 score)
    # is -e^{-t} x - 0 + e^{-t} x, identically zero
    p = GaussianMixturePrior.standard_normal(2)
    t = 0.7
    ev = tweedie(p, t, x)
    analytic = -np.exp(-t) * x - np.einsum("nij,nj->ni", ev.jac_mean, x + 2 * ev.score)
    gauss = float(np.max(np.abs(analytic)))
    symbolic = float(np.max(np.abs(-np.exp(-t) * x - np.exp(-t) * (x - 2 * x))))
    elapsed = time.perf_counter() - start
    ok = s_err <= 1e-6 and h_err <= 1e-5 and hess_res <= 1e-9 and kbe <= 1e-3 and symbolic == 0.0 \
        and gauss <= 1e-12 and elapsed < 60
    _report(capsys, 1, ok, f"score fd {s_err:.2e} (<=1e-6), jacobian fd {h_err:.2e} (<=1e-5), "
                           f"hess-log-rho {hess_res:.2e} (<=1e-9), KBE gmm {kbe:.2e} (<=1e-3), "
                           f"KBE N(0,I) symbolic {symbolic:g} / library {gauss:.1e}, {elapsed:.1f}s")


# ---------------------------------------------------------------- 2


def test_criterion_2_exactness(grid, capsys):
    start = time.perf_counter()
    p = GaussianMixturePrior.standard_normal(2)
    b = np.array([0.8, -0.5])
    r = RewardSpec.linear(b)
    n = 100_000
    # the exact-moment step keeps the Gaussian reverse kernel exact in law
    cfg = SamplerConfig(grid, guidance="dps_continuous", variance="moment", n_paths=n, seed=2)
    X = run_sampler(cfg, p, r).terminal
    z_mean = np.abs(X.mean(axis=0) - b) / np.sqrt(1.0 / n)
    C = np.cov(X.T)
    z_cov = np.abs(C - np.eye(2)) / np.sqrt(np.array([[2.0, 1.0], [1.0, 2.0]]) / n)
    probes = np.random.default_rng(0).normal(0, 1.5, (10, 2))
    w = weight_forward(p, r, probes, grid, n_paths=1000, seed=1)
    z_w = np.abs(w.log_mean_weight) / w.std_error
    elapsed = time.perf_counter() - start
    ok = z_mean.max() <= 3 and z_cov.max() <= 3 and z_w.max() <= 3 and elapsed < 300
    _report(capsys, 2, ok, f"mean |z| max {z_mean.max():.2f}, cov |z| max {z_cov.max():.2f}, "
                           f"omega |log w|/se max {z_w.max():.2f} over 10 probes (all <= 3), {elapsed:.0f}s")


# ---------------------------------------------------------------- 3


def test_criterion_3_recovery(gmm1d, reward1d, grid, capsys):
    start = time.perf_counter()
    cfg = SamplerConfig(grid, guidance="dps_continuous", n_paths=100_000, seed=3)
    ens = run_sampler(cfg, gmm1d, reward1d, functionals={"c": backward_functional(gmm1d, reward1d)})
    lw = path_log_weights(gmm1d, reward1d, ens)
    ok_paths = np.isfinite(lw)
    w = np.exp(lw[ok_paths] - lw[ok_paths].max())
    edges = [np.linspace(-5, 5, 101)]
    oracle = grid_posterior(gmm1d, reward1d, [(-5, 5)], 100)
    tv_rw = tv_distance(histogram(ens.terminal[ok_paths], edges, weights=w), oracle)
    tv_raw = tv_distance(histogram(ens.terminal, edges), oracle)
    # 20 narrow probe bins spread over the bulk; gaps between them are ignored
    lo, hi = np.quantile(ens.terminal[:, 0], [0.05, 0.95])
    centers = np.linspace(lo, hi, 20)
    half = 0.04
    e = np.sort(np.concatenate([centers - half, centers + half]))
    bw = weight_backward(gmm1d, reward1d, ens, binning=[e])
    probe = np.arange(0, e.size - 1, 2)
    fw = weight_forward(gmm1d, reward1d, centers[:, None], grid, n_paths=2000, seed=4)
    bl, bs = bw.estimate.log_mean_weight[probe], bw.estimate.std_error[probe]
    z = np.abs(fw.log_mean_weight - bl) / np.hypot(fw.std_error, bs)
    elapsed = time.perf_counter() - start
    ok = tv_rw <= 0.05 and np.all(z <= 3) and elapsed < 600
    _report(capsys, 3, ok, f"TV reweighted {tv_rw:.4f} (<=0.05; raw DPS {tv_raw:.4f}), forward vs backward "
                           f"|z| max {z.max():.2f} median {np.median(z):.2f} at 20 probes (<=3), {elapsed:.0f}s")


# ---------------------------------------------------------------- 4


def test_criterion_4_four_mode(grid, capsys):
    start = time.perf_counter()
    p, r = four_mode_prior(), band_reward()
    X = run_sampler(SamplerConfig(grid, guidance="dps_continuous", n_paths=500_000, seed=0), p, r).terminal
    t_sample = time.perf_counter() - start
    fine = grid_posterior(p, r, [(-6, 6), (-6, 6)], 96, check=False)
    P, om = fine.points(), fine.cell_mass().ravel()
    ratios = []
    for c in ([3.0, 0.0], [-3.0, 0.0]):
        near = np.linalg.norm(P - c, axis=1) < 1.5
        ratios.append(np.mean(np.linalg.norm(X - c, axis=1) < 1.5) / om[near].sum())
    mass_ok = max(ratios) < 0.5

    coarse = grid_posterior(p, r, [(-6, 6), (-6, 6)], 50, check=False)
    lr, se_h, counts = histogram_ratio_map(X, coarse, min_count=100)
    cells = np.flatnonzero(counts >= 100)
    pts = coarse.points()
    m = over_under_map(p, r, pts[cells], grid, n_paths=100, seed=1)
    ext = over_under_map(p, r, np.array([[3.0, 0.0], [-3.0, 0.0]]), grid, n_paths=100, seed=2)
    fv, fs = m.log_inv_omega, m.std_error
    low = (pts[cells, 1] < -2.5) & (np.abs(pts[cells, 0]) < 1.5)
    over = float(np.nanmean(fv[low])) if low.any() else np.nan
    sign_ok = bool(low.any() and over > 0 and np.all(ext.log_inv_omega < 0))
    z = np.abs(fv - lr[cells]) / np.hypot(fs, se_h[cells])
    agree = np.isfinite(z) & (z <= 3)
    agree_ok = bool(cells.size and agree.all())
    hist_low = float(np.mean(lr[cells][low])) if low.any() else np.nan
    elapsed = time.perf_counter() - start
    ok = mass_ok and sign_ok and agree_ok and elapsed < 1800
    _report(capsys, 4, ok,
            f"x1-extremal mass ratio {ratios[0]:.2e}/{ratios[1]:.2e} (<0.5: {mass_ok}); "
            f"forward log(1/omega) mean {over:.2f} on {int(low.sum())} cells with x2<-2.5 (>0) and "
            f"{ext.log_inv_omega[0]:.2f}/{ext.log_inv_omega[1]:.2f} at (+-3,0) (<0) -> sign {sign_ok} "
            f"(histogram log-ratio there {hist_low:.2f}); map vs histogram within 3 se on "
            f"{int(agree.sum())}/{cells.size} cells with >=100 samples -> {agree_ok}; "
            f"sampling {t_sample:.0f}s, total {elapsed:.0f}s")


# ---------------------------------------------------------------- 5


def test_criterion_5_reaction(gmm2d, reward2d, capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    tilt = Tilt(reward2d)
    worst = 0.0
    spec = 0.0
    for t in (0.05, 0.3, 1.0, 2.0, 3.0):
        x = rng.normal(0, 2, (10, 2))
        an = -c_tilde(gmm2d, reward2d, t, x)
        fd = reaction_fd(gmm2d, lambda s, z: tilt.log_h(gmm2d, s, z), t, x, ht=1e-5, hx=1e-4)
        worst = max(worst, float(np.max(np.abs(an - fd) / np.abs(an))))
        sp = c_dps_spectral(gmm2d, reward2d, t, x)
        spec = max(spec, float(np.max(np.abs(sp.total + an) / np.abs(an))))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-3 and spec <= 1e-9 and elapsed < 60
    _report(capsys, 5, ok, f"trace form vs finite-difference reaction rel err max {worst:.2e} at 50 points "
                           f"(<=1e-3); spectral vs trace {spec:.2e} (<=1e-9), {elapsed:.1f}s")


# ---------------------------------------------------------------- 6


def test_criterion_6_schedules(grid, capsys):
    start = time.perf_counter()
    golden = beta_to_dt(0.02) == 0.010101353658759724 and grid.dt[0] == 5.9953594289806446e-05 \
        and grid.T == 5.063865608605715 and beta_to_dt(0.0) == 0.0
    idx = invert_time(grid, grid.times)
    trip = float(np.max(np.abs(idx - np.arange(grid.N + 1))))
    tt = grid.times[1:]
    win = (tt >= 0.01) & (tt <= 2.5)
    rel_dt = float(np.max(np.abs(dt_closed_form(tt[win]) - grid.dt[win]) / grid.dt[win]))
    ratio = eta(AnnealingSchedule(mode="closed_form"), tt) / eta(AnnealingSchedule(mode="exact_inverse_dt",
                                                                                         grid=grid), tt)
    late = tt >= 0.25
    eta_dev = float(np.max(np.abs(ratio[late] - 1)))
    small = (float(ratio[~late].min()), float(ratio[~late].max()))
    elapsed = time.perf_counter() - start
    ok = golden and trip <= 0.51 and rel_dt <= 0.15 and eta_dev <= 0.10 and elapsed < 1
    _report(capsys, 6, ok, f"goldens {golden}, round trip {trip:.3f} (<=0.51), closed-form dt rel err max "
                           f"{rel_dt:.3f} on [0.01, 2.5] (<=0.15), eta ratio deviation {eta_dev:.3f} for t>=0.25 "
                           f"(<=0.10), small-t eta ratio range [{small[0]:.3f}, {small[1]:.3f}], {elapsed:.2f}s")


# ---------------------------------------------------------------- 7


def test_criterion_7_instability(grid, capsys):
    start = time.perf_counter()
    sf = sign_flow_demo(0.35, 0.1)
    cycle_ok = sf.period == 2 and sf.cycle == (-0.05, 0.05) and abs(sf.amplitude - 0.05) < 1e-15
    dts = np.array([0.2, 0.1, 0.05, 0.025])
    amp = np.array([sign_flow_demo(0.33, h, 200).amplitude for h in dts])
    slope = float(np.polyfit(np.log(dts), np.log(amp), 1)[0])

    p, r = four_mode_prior(), band_reward()
    n = 100
    tails, tails_es, prec = [], [], []
    for i_stop, sink in ((0, tails), (grid.N // 10, tails_es)):
        cfg = SamplerConfig(grid, guidance="dps_discrete", zeta=ZetaMode.trajectory(0.5), i_stop=i_stop,
                            n_paths=n, seed=0, record="states")
        ens = run_sampler(cfg, p, r)
        for j in range(n):
            a = oscillation_alpha(ens.states[j])
            sink.append(a.tail_mean(25))
            if i_stop == 0:
                onset = collapse_onset(a)
                fv = trajectory_stability(p, r, ens.states[j], grid).first_violation()
                prec.append(onset is not None and fv is not None and fv < onset)
    collapsed = float(np.mean(np.array(tails) <= -0.5))
    calm = float(np.mean(np.abs(tails_es) <= 0.25))
    precedes = float(np.mean(prec))
    study = squared_vs_unsquared_study(p, r.A, r.y, grid, n_paths=n, seed=0)
    div_sq = study["squared_unstable"]["divergence_fraction"]
    div_un = study["unsquared"]["divergence_fraction"]
    elapsed = time.perf_counter() - start
    ok = cycle_ok and abs(slope - 1) <= 0.05 and collapsed >= 0.9 and calm >= 0.9 and precedes >= 0.9 \
        and div_sq >= 0.5 and div_un == 0 and elapsed < 900
    _report(capsys, 7, ok, f"cycle {sf.cycle} period {sf.period} ({cycle_ok}), amplitude slope {slope:.3f} "
                           f"(1+-0.05); alpha tail<=-0.5 in {collapsed:.2f} of runs, |tail|<=0.25 with early stop "
                           f"in {calm:.2f} (>=0.9 each); violation precedes collapse in {precedes:.2f} (>=0.9); "
                           f"divergence squared {div_sq:.2f} (>=0.5) unsquared {div_un:.2f} (=0), {elapsed:.0f}s")


# ---------------------------------------------------------------- 8


def test_criterion_8_early_stopping(gmm1d, reward1d, grid, capsys):
    start = time.perf_counter()
    sched = AnnealingSchedule(mode="constant", eta0=1.0)
    edges = np.linspace(-5, 5, 101)
    x = 0.5 * (edges[1:] + edges[:-1])[:, None]
    vol = 0.1

    def tv(a, b):
        return 0.5 * float(np.abs(a - b).sum()) * vol

    prior = grid_posterior(gmm1d, None, [(-5, 5)], 100).values
    es_T = early_stopping_density(gmm1d, reward1d, sched, grid.T, x, grid, seed=0)
    tv_T = tv(es_T.density, prior)

    es_0 = early_stopping_density(gmm1d, reward1d, sched, 0.0, x, grid, seed=1)
    w = weight_forward(gmm1d, reward1d, x, grid, n_paths=256, seed=2, tilt=Tilt(reward1d, sched))
    thm1 = grid_posterior(gmm1d, reward1d, [(-5, 5)], 100).values * np.exp(-w.log_mean_weight)
    thm1 /= thm1.sum() * vol
    tv_0 = tv(es_0.density, thm1)

    i_stop = grid.N // 2
    es_m = early_stopping_density(gmm1d, reward1d, sched, grid.times[i_stop], x, grid, seed=3)
    cfg = SamplerConfig(grid, guidance="dps_continuous", i_stop=i_stop, n_paths=100_000, seed=5)
    h = histogram(run_sampler(cfg, gmm1d, reward1d).terminal, [edges])
    tv_m = tv(es_m.density, h.values.ravel())
    elapsed = time.perf_counter() - start
    ok = tv_T <= 0.05 and tv_0 <= 0.1 and tv_m <= 0.1 and elapsed < 1800
    _report(capsys, 8, ok, f"t*=T vs prior TV {tv_T:.2e} (<=0.05), t*=0 vs reweighted-oracle density TV "
                           f"{tv_0:.4f} (<=0.1), t*=t_{i_stop} vs sampler histogram TV {tv_m:.4f} (<=0.1), "
                           f"{elapsed:.0f}s")


# ---------------------------------------------------------------- 9


def test_criterion_9_determinism(tmp_path, capsys):
    start = time.perf_counter()
    configs = sorted(CONFIGS.glob("*.json"))
    same, codes = [], []
    for c in configs:
        hashes = []
        for rep in ("a", "b"):
            out = tmp_path / c.stem / rep
            codes.append(cli_run(c, out=out))
            hashes.append(json.loads((out / "manifest.json").read_text())["outputs"])
        same.append(hashes[0] == hashes[1])
    elapsed = time.perf_counter() - start
    ok = all(same) and all(code == 0 for code in codes)
    _report(capsys, 9, ok, f"{sum(same)}/{len(configs)} shipped configs reproduce identical output checksums, "
                           f"exit codes {sorted(set(codes))}, {elapsed:.0f}s")
