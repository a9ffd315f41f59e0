"""Acceptance criteria 1-11; each test records one PASS/FAIL line.

The lines are printed in the terminal summary (see conftest.py) and on
stdout when the file is run as a script.
"""
import hashlib
import math
import os
import time

import numpy as np
import pytest
from scipy import stats
from scipy.optimize import brentq

from qflux import bohm
from qflux.cli import main as cli_main
from qflux.compare import BinnedDensity, coverage_report, ks_distance, l1_distance, normalize
from qflux.evolve import Potential, asymptotic_state, evolve, evolve_gaussian
from qflux.flux import (
    Ball,
    Interval,
    binned_flux,
    cap,
    check_cpc,
    continuity_residual,
    current_at,
    default_groups,
    exit_time_density,
    gaussian_cone_probability,
    gaussian_exit_cdf_analytic,
    gaussian_exit_density_analytic,
    polar_bands,
    sigma_cone,
    sigma_flux,
    sphere_mesh,
    truncated_flux_1d,
    verify_fast,
)
from qflux.state import GaussianState, GaussianSuperposition, GridSpec, discretize, make_gaussian

RESULTS = []
ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
BALL5 = Ball((0, 0, 0), 5.0)
FORWARD = cap((1, 0, 0), math.pi / 4)  # 90 degree opening angle
N = 10_000
KS99 = 1.63 / math.sqrt(N)


def report(n, title, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {title} | {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def width(t, m=1.0, sigma=1.0):
    return sigma * math.sqrt(1 + (t / (2 * m * sigma**2)) ** 2)


def backflow_state():
    # packets with p = 1 and p = 4 launched to reach x = 0 together at t = 10
    g1 = GaussianState((-10.0,), (1.0,), 2.0)
    g2 = GaussianState((-40.0,), (4.0,), 2.0)
    return GaussianSuperposition((g1, g2), (1.0, 0.7))


@pytest.fixture(scope="module")
def gaussian_ensemble():
    g = make_gaussian((0, 0, 0), (0, 0, 0), 1.0)
    e = evolve(g, "analytic-free", 200.0)
    return g, e, bohm.run_ensemble(g, e, BALL5, N, 1, 200.0)


@pytest.fixture(scope="module")
def backflow_ensemble():
    s = backflow_state()
    e = evolve(s, "analytic-free", 30.0)
    return s, e, bohm.run_ensemble(s, e, Interval(-80.0, 0.0), N, 7, 30.0)


# --------------------------------------------------------------------------


def test_criterion_01_continuity():
    g = make_gaussian((0, 0, 0), (0.5, 0, 0), 1.0)
    e = evolve(discretize(g, GridSpec((64,) * 3, (40.0,) * 3)), "spectral-free", 4.0, dt=0.2)
    times = np.linspace(0.1, 3.9, 20)
    free = max(continuity_residual(e, BALL5, t) for t in times)

    b = make_gaussian((-4.0, 0, 0), (2.0, 0, 0), 1.0)
    V = Potential("gaussian-bump", 1.0, 1.0, (0.0, 0.0, 0.0))
    eb = evolve(discretize(b, GridSpec((64,) * 3, (32.0,) * 3)), "split-step", 2.0, dt=0.01, dt_frame=0.1, potential=V)
    times_b = np.linspace(0.1, 1.95, 20)
    bump = max(continuity_residual(eb, Ball((-4.0, 0, 0), 5.0), t) for t in times_b)
    ok = free <= 1e-6 and bump <= 1e-5
    report(1, "continuity residual", ok, f"free max {free:.2e} (<= 1e-6), split-step bump max {bump:.2e} (<= 1e-5), 20 times each on 64^3")


def test_criterion_02_free_fast():
    g = make_gaussian((0, 0, 0), (2, 0, 0), 1.0)
    rows = verify_fast(g, FORWARD, (10.0, 20.0, 40.0), 200.0)
    errs = [r.abs_err for r in rows]
    oracle = gaussian_cone_probability((2, 0, 0), 0.5, FORWARD)
    ok = errs[0] > errs[1] > errs[2] and errs[2] <= 2e-2 and abs(rows[0].rhs - oracle) <= 1e-15
    report(2, "free FAST", ok, "abs err R=10/20/40: " + ", ".join(f"{x:.2e}" for x in errs) + f" (strictly decreasing, <= 2e-2 at 40); rhs {oracle:.6f}")


def test_criterion_03_exit_time_density(gaussian_ensemble):
    g, e, r = gaussian_ensemble
    edges = np.linspace(0.0, 200.0, 401)
    numeric = binned_flux(e, polar_bands(BALL5, 1), edges)[0]
    analytic = np.diff(gaussian_exit_cdf_analytic(1.0, 1.0, 5.0, edges))
    a = normalize(BinnedDensity(edges, analytic))
    n = normalize(BinnedDensity(edges, np.clip(numeric, 0, None)))
    l1, ks = l1_distance(a, n), ks_distance(a, n)
    # pointwise check of the closed form against the flux density
    ts = np.linspace(0.5, 60, 120)
    fs = exit_time_density(e, BALL5, ts)
    mass_in = 1 - stats.chi.sf(5.0, 3)
    pw = np.max(np.abs(fs.totals / mass_in - gaussian_exit_density_analytic(1.0, 1.0, 5.0, ts)))
    te = r.exit_time[r.exited & (r.exit_time > 0)]
    ks_mc = stats.kstest(te, lambda t: gaussian_exit_cdf_analytic(1.0, 1.0, 5.0, t)).statistic
    ok = l1 <= 1e-2 and ks <= 5e-3 and ks_mc <= 0.02
    report(3, "Gaussian exit-time density", ok, f"flux vs analytic L1 {l1:.2e} (<= 1e-2), KS {ks:.2e} (<= 5e-3), pointwise {pw:.1e}; ensemble KS {ks_mc:.4f} (<= 0.02, N={N})")


def test_criterion_04_joint_exit_bridge(gaussian_ensemble):
    g, e, r = gaussian_ensemble
    cpc = check_cpc(e, BALL5, np.linspace(0, 50, 201))
    groups = polar_bands(BALL5, 8)
    edges = np.linspace(0.0, 50.0, 65)
    st = bohm.exit_statistics(r, edges, groups)
    pred = binned_flux(e, groups, edges)
    je = np.arange(pred.size + 1) - 0.5
    cov = coverage_report(BinnedDensity(je, st.joint.ravel(), st.joint_se.ravel()), BinnedDensity(je, pred.ravel()))
    inward = int((r.cross_sign < 0).sum())
    ok = cpc.holds and cov.fraction >= 0.95 and inward == 0
    report(4, "joint exit histogram vs flux", ok, f"CPC holds {cpc.holds}; {cov.fraction:.4f} of {cov.count} bins within 3 SE (>= 0.95); inward crossings {inward}")


def test_criterion_05_crossing_expectations(gaussian_ensemble, backflow_ensemble):
    g, e, r = gaussian_ensemble
    groups = polar_bands(BALL5, 8)
    edges = np.linspace(0.0, 50.0, 65)
    cm = bohm.estimate_crossing_measures(r, edges, groups)
    pred = binned_flux(e, groups, edges)
    je = np.arange(pred.size + 1) - 0.5
    cov = coverage_report(BinnedDensity(je, cm.mean_ns.ravel(), cm.se_ns.ravel(), signed=True), BinnedDensity(je, pred.ravel(), signed=True))
    # signed crossings also follow the current where it changes sign
    s, eb, rb = backflow_ensemble
    G = Interval(-80.0, 0.0)
    eb_edges = np.linspace(0.0, 30.0, 241)
    cmb = bohm.estimate_crossing_measures(rb, eb_edges, default_groups(G))
    tf = truncated_flux_1d(eb, G, 30.0)
    net = np.diff(np.stack([np.interp(eb_edges, tf.times, tf.net[:, k]) for k in range(2)]), axis=1)
    jb = np.arange(net.size + 1) - 0.5
    covb = coverage_report(BinnedDensity(jb, cmb.mean_ns.ravel(), cmb.se_ns.ravel(), signed=True), BinnedDensity(jb, net.ravel(), signed=True))
    ok = cov.fraction >= 0.95 and covb.fraction >= 0.95
    report(5, "E(N_s) vs current quadrature", ok, f"CPC ball {cov.fraction:.4f} of {cov.count} bins, 1D backflow {covb.fraction:.4f} of {covb.count} bins within 3 SE (>= 0.95)")


def test_criterion_06_truncated_current(backflow_ensemble):
    s, e, r = backflow_ensemble
    G = Interval(-80.0, 0.0)
    cpc = check_cpc(e, G, np.linspace(0, 30, 3001))
    edges = np.linspace(0.0, 30.0, 241)
    tc = bohm.truncated_current(r, edges, default_groups(G))
    tf = truncated_flux_1d(e, G, 30.0)
    jt = tf.binned(edges)
    j = np.diff(np.stack([np.interp(edges, tf.times, tf.net[:, k]) for k in range(2)]), axis=1)
    je = np.arange(jt.size + 1) - 0.5
    emp = BinnedDensity(je, tc.probability.ravel(), tc.se.ravel())
    cov_jt = coverage_report(emp, BinnedDensity(je, jt.ravel()))
    window = np.zeros_like(j, dtype=bool)
    window[1] = j[1] < 0  # bins with net inward flux at the right end
    sep = np.max(np.abs(jt - j)[window] / tc.se[window])
    cov_j = coverage_report(emp, BinnedDensity(je, j.ravel(), signed=True), mask=window.ravel())
    ok = (not cpc.holds) and sep > 3 and cov_jt.fraction >= 0.95 and cov_j.fraction < 0.95
    report(
        6,
        "truncated current",
        ok,
        f"CPC violated {not cpc.holds}; max |j~ - j|/SE in backflow window {sep:.1f} (> 3); "
        f"ensemble vs j~ {cov_jt.fraction:.4f} of {cov_jt.count} bins (>= 0.95); "
        f"vs j in window {cov_j.fraction:.3f} of {window.sum()} bins (< 0.95)",
    )


def _ks_1d_marginal(r, taus, cdfs):
    return [stats.kstest(r.positions[t][:, 0], cdf).statistic for t, cdf in zip(taus, cdfs)]


def test_criterion_07_equivariance():
    taus = (0.0, 2.0, 5.0)
    g = make_gaussian((0, 0, 0), (1.5, 0, 0), 1.0)
    e = evolve(g, "analytic-free", 5.0)
    cdf_g = [stats.norm(1.5 * t, width(t)).cdf for t in taus]
    s = backflow_state()
    e1 = evolve(s, "analytic-free", 5.0)
    cdf_s = []
    for t in taus:
        xs = np.linspace(-80, 40, 120001)
        rho = np.abs(e1.state_at(t).psi(xs[:, None])) ** 2
        F = np.concatenate([[0], np.cumsum(0.5 * (rho[1:] + rho[:-1]) * np.diff(xs))])
        cdf_s.append(lambda x, xs=xs, F=F: np.interp(x, xs, F))
    worst = {}
    for name, psi, ev, G, cdfs in (("3D Gaussian", g, e, Ball((0, 0, 0), 100.0), cdf_g), ("1D superposition", s, e1, Interval(-200.0, 100.0), cdf_s)):
        runs = []
        for seed in (31, 32):
            r = bohm.run_ensemble(psi, ev, G, N, seed, 5.0, out_times=taus)
            runs.append(_ks_1d_marginal(r, taus, cdfs))
            if max(runs[-1]) <= KS99:
                break
        worst[name] = min(max(k) for k in runs), len(runs)
    ok = all(v[0] <= KS99 for v in worst.values())
    detail = "; ".join(f"{k} max KS {v[0]:.4f} ({v[1]} run(s))" for k, v in worst.items())
    report(7, "equivariance", ok, f"{detail}; bound {KS99:.4f} at t = 0, 2, 5")


def test_criterion_08_trajectory_oracle(gaussian_ensemble):
    g, e, r = gaussian_ensemble
    x0s = r.x0[:200]
    path_err = 0.0
    for x0 in x0s[:50]:
        tr = bohm.integrate_trajectory(x0, e, 50.0)
        ref = x0[None] * np.array([width(t) for t in tr.t])[:, None]
        path_err = max(path_err, float(np.max(np.linalg.norm(tr.x - ref, axis=1) / np.linalg.norm(ref, axis=1))))
    exit_err = 0.0
    for i in range(200):
        rad = float(np.linalg.norm(r.x0[i]))
        if rad >= 5.0:
            continue
        t_star = brentq(lambda t: rad * width(t) - 5.0, 0.0, 1e6, xtol=1e-13)
        exit_err = max(exit_err, abs(r.exit_time[i] - t_star))
    ok = path_err <= 1e-6 and exit_err <= 1e-6
    report(8, "trajectory oracle", ok, f"max relative path error {path_err:.2e} over 50 paths (<= 1e-6); max |t_e - root| {exit_err:.2e} over 200 exits (<= 1e-6)")


def test_criterion_09_sigma_cone_vs_flux():
    g = make_gaussian((0, 0, 0), (2, 0, 0), 1.0)
    e = evolve(g, "analytic-free", 50.0)
    sf = sigma_flux(e, FORWARD, 40.0, 50.0).value
    sc = sigma_cone(e, FORWARD, 50.0)
    oracle = gaussian_cone_probability((2, 0, 0), 0.5, FORWARD)
    d1, d2, d3 = abs(sf - sc), abs(sf - oracle), abs(sc - oracle)
    ok = max(d1, d2, d3) <= 2e-2
    report(9, "sigma_cone vs sigma_flux", ok, f"sigma_flux {sf:.5f}, sigma_cone {sc:.5f}, momentum oracle {oracle:.5f}; max gap {max(d1, d2, d3):.2e} (<= 2e-2)")


def test_criterion_10_asymptotics():
    g1 = make_gaussian((0.0,), (0.0,), 1.0)
    errs = []
    for t in (10.0, 30.0, 100.0):
        spec = GridSpec(4096, 12.0 * t)
        a = asymptotic_state(g1, t, spec)
        ex = discretize(evolve_gaussian(g1, t), spec)
        overlap = np.sum(np.conj(a.amplitudes) * ex.amplitudes) * spec.cell_volume
        # centred Gaussians factorize: the 3D overlap is the cube of the 1D one
        errs.append(math.sqrt(max(0.0, 2 - 2 * (overlap**3).real)))
    # direct 3D check of the factorization at t = 10
    g3 = make_gaussian((0, 0, 0), (0, 0, 0), 1.0)
    spec3 = GridSpec((128,) * 3, (80.0,) * 3)
    a3 = asymptotic_state(g3, 10.0, spec3)
    e3 = evolve_gaussian(g3, 10.0).psi(spec3.points()).reshape(spec3.shape)
    err3 = math.sqrt(np.sum(np.abs(a3.amplitudes - e3) ** 2) * spec3.cell_volume)
    del a3, e3
    gb = make_gaussian((0, 0, 0), (2, 0, 0), 1.0)
    t = 100.0
    mesh = sphere_mesh(Ball((0, 0, 0), 200.0), 32, 64, axis=(1, 0, 0))
    j = current_at(gb, mesh.points, t)
    radial = np.einsum("md,md->m", j, mesh.normals)
    transverse = np.linalg.norm(j - radial[:, None] * mesh.normals, axis=1)
    ratio = float(np.sum(transverse * mesh.weights) / np.sum(np.abs(radial) * mesh.weights))
    ok = errs[0] > errs[1] > errs[2] and errs[2] <= 0.05 and abs(err3 - errs[0]) <= 1e-6 and ratio <= 1e-2
    report(
        10,
        "asymptotics",
        ok,
        "3D L2 error t=10/30/100: " + ", ".join(f"{x:.4f}" for x in errs) + f" (decreasing, <= 0.05 at 100; direct 3D at t=10 {err3:.4f}); "
        f"transverse/radial current {ratio:.1e} at t=100 on the sphere through the peak (<= 1e-2)",
    )


def _digests(out):
    lines = (out / "manifest.txt").read_text().splitlines()
    return [line for line in lines if not line.startswith("#")]


def test_criterion_11_determinism_and_speed(tmp_path):
    cfg = os.path.join(ROOT, "configs", "gaussian_ball.cfg")
    outs = []
    for threads in (1, 8):
        out = tmp_path / f"threads{threads}"
        assert cli_main(["exit-stats", "--config", cfg, "--out", str(out), "--threads", str(threads)]) == 0
        outs.append(out)
    same = _digests(outs[0]) == _digests(outs[1])
    g = make_gaussian((0, 0, 0), (0, 0, 0), 1.0)
    e = evolve(g, "analytic-free", 50.0)
    cores = os.cpu_count() or 1
    t0 = time.perf_counter()
    r = bohm.run_ensemble(g, e, BALL5, N, 1, 50.0, threads=min(8, cores))
    wall = time.perf_counter() - t0
    digest = hashlib.sha256(np.ascontiguousarray(r.exit_time).tobytes()).hexdigest()[:12]
    ok = same and wall <= 60.0 and r.failed == 0
    report(11, "determinism and performance", ok, f"--threads 1 vs 8 digests identical {same} ({len(_digests(outs[0]))} files); {N} trajectories in {wall:.1f} s on {cores} core(s) (<= 60 s), exit-time digest {digest}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
