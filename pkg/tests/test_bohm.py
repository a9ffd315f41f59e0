import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from scipy.optimize import brentq

from qflux import bohm
from qflux.errors import EnsembleError, InvalidParameter, InvalidSetup, NodeProximity
from qflux.evolve import evolve
from qflux.flux import Ball, Interval, binned_flux, default_groups, polar_bands
from qflux.state import GaussianState, GaussianSuperposition, GridSpec, discretize, make_gaussian

BALL5 = Ball((0, 0, 0), 5.0)
INTERVAL = Interval(-80.0, 0.0)
# a backflow trajectory found by an ensemble scan: exits, re-enters, exits near t = 9.5
BACKFLOW_X0 = -10.36472774


def width(t, m=1.0, sigma=1.0):
    return sigma * math.sqrt(1 + (t / (2 * m * sigma**2)) ** 2)


def backflow_state():
    g1 = GaussianState((-10.0,), (1.0,), 2.0)
    g2 = GaussianState((-40.0,), (4.0,), 2.0)
    return GaussianSuperposition((g1, g2), (1.0, 0.7))


@pytest.fixture(scope="module")
def gaussian_run():
    g = make_gaussian((0, 0, 0), (0, 0, 0), 1.0)
    e = evolve(g, "analytic-free", 200.0)
    return g, e, bohm.run_ensemble(g, e, BALL5, 2000, 3, 200.0, block=256)


@pytest.fixture(scope="module")
def backflow_run():
    s = backflow_state()
    e = evolve(s, "analytic-free", 30.0)
    return s, e, bohm.run_ensemble(s, e, INTERVAL, 2000, 7, 30.0)


# --- velocity ------------------------------------------------------------------


def test_velocity_centred_gaussian_scaling():
    t = 3.0
    e = evolve(make_gaussian((0, 0, 0), (0, 0, 0), 1.0), "analytic-free", 5.0)
    g = e.state_at(t)
    x = np.array([[0.3, -1.0, 2.0], [1.5, 0.0, 0.0]])
    v = bohm.velocity_at(g, x)
    # s'/s = (t / 4) / (1 + t^2 / 4) for m = sigma = 1
    assert np.allclose(v, x * (0.75 / 3.25), rtol=1e-12, atol=1e-15)
    # finite difference of the phase
    h = 1e-5
    for k in range(3):
        dx = np.zeros(3)
        dx[k] = h
        ph = np.angle(g.psi(x + dx) / g.psi(x - dx)) / (2 * h)
        assert np.allclose(v[:, k], ph, atol=1e-8)


def test_velocity_boosted_at_zero_and_static_at_zero():
    p0 = np.array([0.7, -1.2, 2.0])
    g = make_gaussian((1, 2, 3), p0, 1.3, mass=2.0)
    x = np.random.default_rng(0).normal(size=(20, 3)) + (1, 2, 3)
    assert np.max(np.abs(bohm.velocity_at(g, x) - p0 / 2.0)) <= 1e-10
    g0 = make_gaussian((0, 0, 0), (0, 0, 0), 1.0)
    assert np.max(np.abs(bohm.velocity_at(g0, x))) == 0.0


def test_velocity_grid_state_matches_analytic():
    g = make_gaussian((0.0,), (1.5,), 1.0)
    s = discretize(g, GridSpec(256, 40.0))
    x = np.linspace(-2, 2, 9)[:, None]
    assert np.allclose(bohm.velocity_at(s, x), 1.5, atol=1e-9)


def test_velocity_node_guard():
    g = make_gaussian((0, 0, 0), (0, 0, 0), 1.0)
    with pytest.raises(NodeProximity):
        bohm.velocity_at(g, np.array([[50.0, 0, 0]]))


# --- single trajectories ----------------------------------------------------------


@pytest.mark.parametrize("x0", [(0.5, -0.3, 1.2), (2.0, 0.0, 0.0), (-0.01, 0.02, 0.03)])
def test_trajectory_scaling_law(x0):
    g = make_gaussian((0, 0, 0), (0, 0, 0), 1.0)
    e = evolve(g, "analytic-free", 50.0)
    tr = bohm.integrate_trajectory(x0, e, 50.0)
    assert tr.status == "horizon" and tr.t[-1] == pytest.approx(50.0, abs=1e-12)
    ref = np.array(x0)[None] * np.array([width(t) for t in tr.t])[:, None]
    rel = np.linalg.norm(tr.x - ref, axis=1) / np.linalg.norm(ref, axis=1)
    assert rel.max() <= 1e-6


def test_trajectory_scaling_law_boosted_mass():
    m, sigma = 2.0, 0.8
    p0 = np.array([1.0, 0.5, 0.0])
    g = make_gaussian((1.0, 0, 0), p0, sigma, mass=m)
    e = evolve(g, "analytic-free", 30.0)
    x0 = np.array([1.4, -0.2, 0.5])
    tr = bohm.integrate_trajectory(x0, e, 30.0, out_times=[10.0, 30.0])
    for t in (10.0, 30.0):
        centre = np.array([1.0, 0, 0]) + p0 * t / m
        ref = centre + (x0 - (1.0, 0, 0)) * width(t, m, sigma) / sigma
        assert np.linalg.norm(tr.positions[t] - ref) / np.linalg.norm(ref) <= 1e-6


def test_trajectory_dense_output():
    g = make_gaussian((0, 0, 0), (0, 0, 0), 1.0)
    e = evolve(g, "analytic-free", 20.0)
    x0 = np.array([1.0, 0.5, -0.5])
    tr = bohm.integrate_trajectory(x0, e, 20.0)
    for t in (0.37, 4.2, 17.9):
        assert np.linalg.norm(tr.at(t) - x0 * width(t)) <= 1e-6 * np.linalg.norm(x0 * width(t))


def test_centre_stays():
    g = make_gaussian((1.0, -2.0, 0.5), (0, 0, 0), 1.0)
    e = evolve(g, "analytic-free", 40.0)
    tr = bohm.integrate_trajectory((1.0, -2.0, 0.5), e, 40.0)
    assert np.max(np.abs(tr.x - (1.0, -2.0, 0.5))) <= 1e-12


@given(a=st.floats(-14.0, -6.0), gap=st.floats(1e-3, 2.0))
@settings(max_examples=15, deadline=None)
def test_1d_trajectories_never_cross(a, gap):
    s = backflow_state()
    e = evolve(s, "analytic-free", 25.0)
    times = np.linspace(0.5, 25.0, 50)
    lo = bohm.integrate_trajectory([a], e, 25.0, out_times=times)
    hi = bohm.integrate_trajectory([a + gap], e, 25.0, out_times=times)
    assert all(lo.positions[t][0] < hi.positions[t][0] for t in times)


def test_grid_trajectory_converges_second_order():
    # trilinear-in-space, linear-in-time velocity: halving h and dt_frame quarters the error
    g = make_gaussian((0.0,), (1.0,), 1.0)
    ref = 5.0 + 0.5 * width(5.0)
    errs = []
    for n, dtf in ((512, 0.05), (1024, 0.025)):
        e = evolve(discretize(g, GridSpec(n, 64.0)), "spectral-free", 5.0, dt=dtf, dt_frame=dtf)
        tr = bohm.integrate_trajectory([0.5], e, 5.0, out_times=[5.0])
        errs.append(abs(tr.positions[5.0][0] - ref))
    assert errs[0] <= 2e-2
    assert 3.0 <= errs[0] / errs[1] <= 5.0


def test_trajectory_rejects_start_outside_grid():
    s = discretize(make_gaussian((0.0,), (0.5,), 1.0), GridSpec(128, 24.0))
    e = evolve(s, "spectral-free", 1.0, dt=0.05, dt_frame=0.05)
    with pytest.raises(InvalidParameter):
        bohm.integrate_trajectory([30.0], e, 1.0)


# --- crossings and first exit -----------------------------------------------------------


def test_crossings_inside_is_empty():
    g = make_gaussian((0, 0, 0), (0, 0, 0), 1.0)
    e = evolve(g, "analytic-free", 20.0)
    tr = bohm.integrate_trajectory((0.2, 0.1, 0.0), e, 20.0)
    assert bohm.detect_crossings(tr, BALL5) == []
    ev = bohm.first_exit(tr, BALL5)
    assert not ev.exited and ev.t_e is None


def test_monotone_outward_single_crossing():
    g = make_gaussian((0, 0, 0), (0, 0, 0), 1.0)
    e = evolve(g, "analytic-free", 30.0)
    x0 = np.array([0.6, 0.8, 0.0])
    tr = bohm.integrate_trajectory(x0, e, 30.0)
    cs = bohm.detect_crossings(tr, BALL5)
    assert [c.sign for c in cs] == [1]
    # |x0| s_t / sigma = R
    t_star = brentq(lambda t: width(t) - 5.0, 0.0, 30.0, xtol=1e-14)
    assert t_star == pytest.approx(2 * math.sqrt(24), abs=1e-12)
    assert cs[0].time == pytest.approx(t_star, rel=1e-6)
    assert np.allclose(cs[0].position, x0 * 5.0, atol=1e-5)
    ev = bohm.first_exit(tr, BALL5, cs)
    assert ev.exited and ev.t_e == cs[0].time and ev.patch == cs[0].patch


@pytest.mark.parametrize("r0,R", [(1.0, 5.0), (0.3, 2.0), (2.5, 10.0)])
def test_first_exit_root_find(r0, R):
    g = make_gaussian((0, 0, 0), (0, 0, 0), 1.0)
    e = evolve(g, "analytic-free", 200.0)
    G = Ball((0, 0, 0), R)
    u = np.array([1.0, -2.0, 2.0]) / 3.0
    tr = bohm.integrate_trajectory(r0 * u, e, 200.0, G=G)
    ev = bohm.first_exit(tr, G)
    t_star = brentq(lambda t: r0 * width(t) - R, 0.0, 200.0, xtol=1e-14)
    assert ev.t_e == pytest.approx(t_star, rel=1e-6)


def test_start_outside_exits_at_t0():
    g = make_gaussian((0, 0, 0), (0, 0, 0), 1.0)
    e = evolve(g, "analytic-free", 5.0)
    tr = bohm.integrate_trajectory((6.0, 0, 0), e, 5.0, G=BALL5)
    ev = bohm.first_exit(tr, BALL5)
    assert ev.t_e == 0.0 and np.array_equal(ev.x_e, [6.0, 0, 0])


def test_backflow_trajectory_signs_against_fine_scan():
    s = backflow_state()
    e = evolve(s, "analytic-free", 30.0)
    tr = bohm.integrate_trajectory([BACKFLOW_X0], e, 30.0, G=INTERVAL)
    cs = bohm.detect_crossings(tr, INTERVAL)
    assert [c.sign for c in cs] == [1, -1, 1]
    assert [c.patch for c in cs] == [1, 1, 1]
    assert [c.sign for c in tr.crossings] == [1, -1, 1]
    # sign scan of the boundary distance at ten times finer sampling
    # (independent run without boundary step control, sampled through its dense output)
    ref = bohm.integrate_trajectory([BACKFLOW_X0], e, 10.0)
    win = (tr.t >= 9.0) & (tr.t <= 10.0)
    dt = np.median(np.diff(tr.t[win])) / 10
    fine = np.arange(9.0, 10.0, dt)
    x = np.array([ref.at(t)[0] for t in fine])
    flips = np.nonzero(np.diff(np.sign(x)) != 0)[0]
    assert len(flips) == 3
    assert [int(np.sign(x[k + 1])) for k in flips] == [1, -1, 1]
    for c, k in zip(cs, flips):
        assert fine[k] <= c.time <= fine[k + 1]
    assert bohm.first_exit(tr, INTERVAL).t_e == cs[0].time


# --- ensembles ------------------------------------------------------------------------------


def test_ensemble_exit_fraction(gaussian_run):
    _, _, r = gaussian_run
    assert r.failed == 0
    assert abs(r.exited.mean() - 1.0) <= 3 / math.sqrt(r.count)


def test_ensemble_deterministic_and_thread_independent():
    g = make_gaussian((0, 0, 0), (1, 0, 0), 1.0)
    e = evolve(g, "analytic-free", 20.0)
    a = bohm.run_ensemble(g, e, BALL5, 600, 9, 20.0, block=128)
    b = bohm.run_ensemble(g, e, BALL5, 600, 9, 20.0, block=128, threads=4)
    for name in ("x0", "status", "exit_time", "exit_pos", "exit_patch", "cross_traj", "cross_time", "cross_sign", "cross_patch", "cross_pos"):
        assert np.array_equal(getattr(a, name), getattr(b, name), equal_nan=name in ("exit_time", "exit_pos"))
    c = bohm.run_ensemble(g, e, BALL5, 600, 10, 20.0, block=128)
    assert not np.array_equal(a.x0, c.x0)


def test_ensemble_rejects_mass_outside():
    g = make_gaussian((4.0, 0, 0), (0, 0, 0), 1.0)
    e = evolve(g, "analytic-free", 5.0)
    with pytest.raises(InvalidSetup):
        bohm.run_ensemble(g, e, BALL5, 10, 0, 5.0)


def test_ensemble_error_on_failures():
    g = make_gaussian((0.0,), (0.5,), 1.0)
    e = evolve(discretize(g, GridSpec(128, 40.0)), "spectral-free", 2.0, dt=0.05, dt_frame=0.05)
    tol = bohm.Tolerances(max_steps=3)
    with pytest.raises(EnsembleError):
        bohm.run_ensemble(g, e, Interval(-8.0, 8.0), 50, 0, 2.0, tol)


def test_cpc_case_has_no_inward_crossings(gaussian_run):
    _, _, r = gaussian_run
    assert np.all(r.cross_sign == 1)
    edges = np.linspace(0, 200, 65)
    cm = bohm.estimate_crossing_measures(r, edges, polar_bands(BALL5))
    assert np.array_equal(cm.mean_n, cm.mean_ns)


def test_crossing_measures_match_flux(gaussian_run):
    g, e, r = gaussian_run
    edges = np.linspace(0, 30, 16)
    groups = polar_bands(BALL5, 4)
    cm = bohm.estimate_crossing_measures(r, edges, groups)
    pred = binned_flux(e, groups, edges)
    z = np.abs(cm.mean_ns - pred) / cm.se_ns
    assert np.mean(z <= 3) >= 0.95


def test_symmetric_exit_positions_uniform(gaussian_run):
    _, _, r = gaussian_run
    groups = polar_bands(BALL5, 8)
    st_ = bohm.exit_statistics(r, np.array([0.0, 200.0]), groups)
    counts = np.round(st_.position_marginal * r.count)
    chi2 = stats.chisquare(counts)
    assert chi2.pvalue >= 0.01
    assert st_.joint.sum() == pytest.approx(st_.exited_fraction, abs=1e-15)


def test_backflow_has_inward_crossings(backflow_run):
    _, _, r = backflow_run
    edges = np.linspace(0, 30, 61)
    groups = default_groups(INTERVAL)
    cm = bohm.estimate_crossing_measures(r, edges, groups)
    assert np.any(cm.mean_n > cm.mean_ns)
    plus, minus = r.crossing_counts(edges, groups)
    assert minus.sum() > 0
    assert np.array_equal(plus - minus, np.round(cm.mean_ns * r.count).astype(int))


def test_truncated_current_counts_first_exits(backflow_run):
    _, _, r = backflow_run
    edges = np.linspace(0, 30, 61)
    tc = bohm.truncated_current(r, edges, default_groups(INTERVAL))
    assert tc.probability.sum() == pytest.approx(r.exited.mean(), abs=1e-12)
    assert tc.probability.sum() <= 1.0
    assert np.allclose(tc.rate * np.diff(edges), tc.probability)


def test_backward_crossings_decay_with_radius():
    g = make_gaussian((0, 0, 0), (2, 0, 0), 1.0)
    e = evolve(g, "analytic-free", 100.0)
    inward = []
    for R in (10.0, 20.0, 40.0):
        r = bohm.run_ensemble(g, e, Ball((0, 0, 0), R), 1000, 4, 100.0)
        inward.append(int((r.cross_sign < 0).sum()))
        assert r.exited.mean() == pytest.approx(1.0, abs=0.01)
    assert inward[0] >= inward[1] >= inward[2]


def test_equivariance_ks():
    g = make_gaussian((0, 0, 0), (1.5, 0, 0), 1.0)
    t = 4.0
    e = evolve(g, "analytic-free", t)
    N = 10_000
    bound = 1.63 / math.sqrt(N)
    ks = []
    for seed in (21, 22):
        r = bohm.run_ensemble(g, e, Ball((0, 0, 0), 200.0), N, seed, t, out_times=[t])
        x = r.positions[t][:, 0]
        ks.append(stats.kstest(x, stats.norm(1.5 * t, width(t)).cdf).statistic)
    assert ks[0] <= bound or ks[1] <= bound


# --- CSV ---------------------------------------------------------------------------------------


def test_csv_writers(tmp_path, backflow_run):
    _, _, r = backflow_run
    p = tmp_path / "exits.csv"
    bohm.write_exits(p, r)
    lines = p.read_text().splitlines()
    assert lines[0] == "traj_id,t_e,x,y,z,patch_id"
    assert len(lines) == r.count + 1
    for i, line in enumerate(lines[1:]):
        f = line.split(",")
        assert int(f[0]) == i
        if r.exited[i]:
            assert float(f[1]) == r.exit_time[i] and f[3] == "" and f[4] == ""
        else:
            assert f[1:] == ["", "", "", "", ""]
    q = tmp_path / "crossings.csv"
    bohm.write_crossings(q, r.cross_traj, r.cross_time, r.cross_sign, r.cross_patch)
    rows = [line.split(",") for line in q.read_text().splitlines()[1:]]
    keys = [(int(a), float(b)) for a, b, _, _ in rows]
    assert keys == sorted(keys) and len(rows) == r.cross_time.size


def test_trajectory_csv_decimation(tmp_path):
    g = make_gaussian((0, 0, 0), (0, 0, 0), 1.0)
    e = evolve(g, "analytic-free", 10.0)
    trs = [bohm.integrate_trajectory(x0, e, 10.0) for x0 in ((1, 0, 0), (0, 1, 0))]
    p = tmp_path / "traj.csv"
    bohm.write_trajectories(p, trs, decimate=3)
    rows = [line.split(",") for line in p.read_text().splitlines()[1:]]
    n0 = sum(1 for r in rows if r[0] == "0")
    assert n0 == len(range(0, len(trs[0].t), 3)) + (0 if (len(trs[0].t) - 1) % 3 == 0 else 1)
    assert float([r for r in rows if r[0] == "0"][-1][1]) == trs[0].t[-1]
