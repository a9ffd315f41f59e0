"""Bohmian trajectories, boundary crossings and quantum-equilibrium ensembles.

Trajectories solve dx/dt = Im(grad psi / psi)/m with an embedded
Dormand-Prince 5(4) pair. Every particle of a block carries its own time
and step size, so a block advances as one vectorized array computation
while each particle follows exactly the steps it would take alone.
Crossings are found from sign changes of the boundary functions along
cubic Hermite dense output and refined by bisection.

Ensembles are split into fixed-size blocks independent of the thread
count, and results are assembled in trajectory order, so an ensemble is a
pure function of (state, evolution, region, N, seed, tolerances).
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import EnsembleError, InvalidParameter, InvalidSetup, NodeProximity
from .evolve import Evolution
from .flux import Ball, Interval, PatchGroups, region_mass, region_mesh
from .compare import fmt
from .state import AnalyticState, _corner_weights, sample_positions, spectral_fields

log = logging.getLogger(__name__)

# Dormand-Prince 5(4)
_C = np.array([0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1, 1])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_E = np.array([71 / 57600, 0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])

STATUS_RUNNING = 0
STATUS_HORIZON = 1
STATUS_FAR = 2
STATUS_NODE = 3
STATUS_DOMAIN = 4
STATUS_MAXSTEPS = 5
STATUS_NAMES = {
    STATUS_RUNNING: "running",
    STATUS_HORIZON: "horizon",
    STATUS_FAR: "exited-and-far",
    STATUS_NODE: "node-stall",
    STATUS_DOMAIN: "domain-exit",
    STATUS_MAXSTEPS: "max-steps",
}
FAILED = (STATUS_NODE, STATUS_DOMAIN, STATUS_MAXSTEPS)


@dataclass(frozen=True)
class Tolerances:
    rtol: float = 1e-8
    atol: float = 1e-10
    h_init: float = 1e-3
    h_max: float = math.inf
    boundary_safety: float = 0.5  # step <= safety * distance / speed near the boundary
    boundary_floor: float = 1e-3  # ... but never below this
    subsamples: int = 4  # interior dense-output probes per step
    crossing_tol: float = 1e-10
    node_eps: float = 1e-12
    node_stall_steps: int = 1000
    far_margin: float | None = None  # default: region radius
    max_steps: int = 2_000_000


# --------------------------------------------------------------------------
# velocity fields


def _log_peak_density(state: AnalyticState, t):
    packets = getattr(state, "packets", (state,))
    coefs = getattr(state, "coefficients", (1.0,))
    d = state.dim
    amp = 0.0
    for c, g in zip(coefs, packets):
        w2 = g.sigma**2 * (1 + (np.asarray(t) / (2 * g.mass * g.sigma**2)) ** 2)
        amp = amp + abs(c) * (2 * np.pi * w2) ** (-d / 4)
    return 2 * np.log(amp)


def velocity_at(s, x, node_eps: float = 1e-12) -> np.ndarray:
    """Bohmian velocity Im(grad psi / psi)/m at points ``x`` of a single state.

    Raises :class:`NodeProximity` where |psi|^2 < node_eps * max density.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if isinstance(s, AnalyticState):
        logrho, v = s.log_density_and_velocity(x)
        near = logrho < math.log(node_eps) + _log_peak_density(s, s.t)
    else:
        psi, grad = spectral_fields(s, x)
        rho = np.abs(psi) ** 2
        near = rho < node_eps * s.density().max()
        with np.errstate(divide="ignore", invalid="ignore"):
            v = (np.conj(psi)[:, None] * grad).imag / (s.mass * rho[:, None])
    if np.any(near):
        raise NodeProximity(f"{int(near.sum())} point(s) too close to a node of psi")
    return v


class VelocityField:
    """v(t, x) with a node flag, for per-particle times."""

    def __init__(self, e: Evolution, node_eps: float = 1e-12):
        self.e = e
        self.node_eps = node_eps
        self.log_eps = math.log(node_eps)
        if not e.is_analytic:
            if len(e.frames) < 2:
                raise InvalidParameter("grid trajectories need an evolution with stored frames")
            self.spec = e.spec
            self.psi = np.stack([f.amplitudes for f in e.frames])
            self.grad = np.stack([np.moveaxis(e.frame_gradient(j), 0, -1) for j in range(len(e.frames))])
            self.rho_max = float(max(f.density().max() for f in e.frames))
            self.ft0 = e.frames[0].t
            self.dtf = e.dt_frame

    @property
    def max_step(self) -> float:
        return math.inf if self.e.is_analytic else self.dtf

    def in_domain(self, x) -> np.ndarray:
        if self.e.is_analytic:
            return np.ones(len(x), dtype=bool)
        return self.spec.contains(x)

    def __call__(self, t, x):
        if self.e.is_analytic:
            st = self.e.initial
            logrho, v = st.log_density_and_velocity(x, t)
            node = ~(logrho >= self.log_eps + _log_peak_density(st, t))
            return v, node
        F = self.psi.shape[0]
        u = (t - self.ft0) / self.dtf
        j = np.clip(np.floor(u).astype(int), 0, F - 2)
        lam = np.clip(u - j, 0.0, 1.0)
        psi = 0
        grad = 0
        for idx, w in _corner_weights(self.spec, x):
            for jj, wt in ((j, 1 - lam), (j + 1, lam)):
                ww = w * wt
                psi = psi + self.psi[(jj, *idx)] * ww
                grad = grad + self.grad[(jj, *idx)] * ww[:, None]
        rho = np.abs(psi) ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            v = (np.conj(psi)[:, None] * grad).imag / (self.e.mass * rho[:, None])
        return v, ~(rho >= self.node_eps * self.rho_max)


# --------------------------------------------------------------------------
# dense output and crossing scan


def _hermite(theta, h, x0, f0, x1, f1):
    th = theta[:, None]
    th2, th3 = th * th, th * th * th
    hh = h[:, None]
    pos = (2 * th3 - 3 * th2 + 1) * x0 + (th3 - 2 * th2 + th) * hh * f0 + (-2 * th3 + 3 * th2) * x1 + (th3 - th2) * hh * f1
    vel = ((6 * th2 - 6 * th) * x0 + (3 * th2 - 4 * th + 1) * hh * f0 + (-6 * th2 + 6 * th) * x1 + (3 * th2 - 2 * th) * hh * f1) / hh
    return pos, vel


def _boundary(region, x):
    return region.boundary_functions(x)


def _scan_steps(region, t0, h, x0, f0, x1, f1, subsamples, crossing_tol):
    """Crossings inside steps [t0, t0 + h]; returns (row, time, position, sign, boundary_index)."""
    M = len(t0)
    S = subsamples + 2
    thetas = np.linspace(0.0, 1.0, S)
    g = np.empty((M, S, region.boundary_functions(x0[:1]).shape[1]))
    g[:, 0] = _boundary(region, x0)
    g[:, -1] = _boundary(region, x1)
    for k in range(1, S - 1):
        pos, _ = _hermite(np.full(M, thetas[k]), h, x0, f0, x1, f1)
        g[:, k] = _boundary(region, pos)
    out_a = g[:, :-1] >= 0
    out_b = g[:, 1:] >= 0
    rows, segs, fns = np.nonzero(out_a != out_b)
    if rows.size == 0:
        return None
    lo = thetas[segs]
    hi = thetas[segs + 1]
    glo = g[rows, segs, fns]
    hr = h[rows]
    args = (hr, x0[rows], f0[rows], x1[rows], f1[rows])
    iters = int(np.ceil(np.log2(max(np.max(hr * (hi - lo)) / crossing_tol, 2.0))))
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        pos, _ = _hermite(mid, *args)
        gm = _boundary(region, pos)[np.arange(len(rows)), fns]
        same = (gm >= 0) == (glo >= 0)
        lo = np.where(same, mid, lo)
        hi = np.where(same, hi, mid)
    theta = 0.5 * (lo + hi)
    pos, vel = _hermite(theta, *args)
    sign = np.where(glo < 0, 1, -1)
    # exact tangency is not a crossing
    normals = region.normals(pos, fns)
    vn = np.einsum("md,md->m", vel, normals)
    keep = np.abs(vn) > 1e-14
    order = np.lexsort((theta, rows))
    order = order[keep[order]]
    return rows[order], t0[rows][order] + theta[order] * hr[order], pos[order], sign[order], fns[order]


def _patch_ids(region, mesh, pos, fns):
    if isinstance(region, Interval):
        return fns.astype(int)
    return mesh.patch_of(pos)


# --------------------------------------------------------------------------
# records


@dataclass
class Crossing:
    patch: int
    time: float
    sign: int
    position: np.ndarray


@dataclass
class ExitEvent:
    t_e: float | None
    x_e: np.ndarray | None
    patch: int = -1

    @property
    def exited(self) -> bool:
        return self.t_e is not None


@dataclass
class Trajectory:
    x0: np.ndarray
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    status: str
    crossings: list = field(default_factory=list)
    positions: dict = field(default_factory=dict)

    def at(self, t) -> np.ndarray:
        """Dense-output position at time ``t`` within the integrated range."""
        i = int(np.clip(np.searchsorted(self.t, t, side="right") - 1, 0, len(self.t) - 2))
        h = self.t[i + 1] - self.t[i]
        pos, _ = _hermite(np.array([(t - self.t[i]) / h]), np.array([h]), self.x[i : i + 1], self.v[i : i + 1], self.x[i + 1 : i + 2], self.v[i + 1 : i + 2])
        return pos[0]


@dataclass
class _BlockResult:
    status: np.ndarray
    t_end: np.ndarray
    x_end: np.ndarray
    cross_row: np.ndarray
    cross_time: np.ndarray
    cross_pos: np.ndarray
    cross_sign: np.ndarray
    cross_patch: np.ndarray
    positions: dict
    samples: list | None
    steps: np.ndarray


def _integrate_block(x0, field, region, mesh, t0, horizon, tol: Tolerances, out_times=(), record=False):
    """Integrate all rows of ``x0`` from t0 to t0 + horizon."""
    x0 = np.asarray(x0, dtype=float)
    N, d = x0.shape
    t_stop = t0 + horizon
    t = np.full(N, float(t0))
    x = x0.copy()
    f, node = field(t, x)
    h = np.full(N, tol.h_init)
    status = np.zeros(N, dtype=int)
    node_steps = node.astype(int)
    steps = np.zeros(N, dtype=int)
    out_times = np.sort(np.asarray(out_times, dtype=float))
    positions = {float(tau): np.full((N, d), np.nan) for tau in out_times}
    for tau in out_times:
        if abs(tau - t0) < 1e-15:
            positions[float(tau)][:] = x0
    last_out = out_times[-1] if out_times.size else -math.inf
    far = tol.far_margin
    if far is None:
        far = region.radius if isinstance(region, Ball) else 0.5 * (region.b - region.a)
    h_cap = min(tol.h_max, field.max_step)
    samples = [[(t0, x0[i].copy(), f[i].copy())] for i in range(N)] if record else None
    crosses = []
    ever_out = np.any(_boundary(region, x0) >= 0, axis=1)

    alive = np.ones(N, dtype=bool)
    while True:
        idx = np.nonzero(alive)[0]
        if idx.size == 0:
            break
        ti, xi, fi = t[idx], x[idx], f[idx]
        gb = _boundary(region, xi)
        dist = np.min(np.abs(gb), axis=1)
        speed = np.linalg.norm(fi, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            cap = np.maximum(tol.boundary_safety * dist / speed, tol.boundary_floor)
        cap = np.where(np.isfinite(cap), cap, h_cap)
        hi = np.minimum(np.minimum(h[idx], cap), h_cap)
        hi = np.minimum(hi, t_stop - ti)
        if out_times.size:
            # land exactly on output times
            k_next = np.searchsorted(out_times, ti * (1 + 1e-15) + 1e-15, side="right")
            has = k_next < out_times.size
            gap = out_times[np.minimum(k_next, out_times.size - 1)] - ti
            hi = np.where(has & (gap > 0), np.minimum(hi, gap), hi)
        k = [fi]
        for s in range(1, 7):
            xs = xi + hi[:, None] * sum(a * kk for a, kk in zip(_A[s], k) if a != 0)
            ks, _ = field(ti + _C[s] * hi, xs)
            k.append(ks)
        x_new = xi + hi[:, None] * sum(a * kk for a, kk in zip(_A[6], k) if a != 0)
        f_new = k[6]
        err = hi[:, None] * sum(e * kk for e, kk in zip(_E, k) if e != 0)
        scale = tol.atol + tol.rtol * np.maximum(np.abs(xi), np.abs(x_new))
        en = np.sqrt(np.mean((err / scale) ** 2, axis=1))
        en = np.where(np.isfinite(en) & np.all(np.isfinite(x_new), axis=1), en, np.inf)
        acc = en <= 1.0
        fac = np.where(en == 0, 5.0, 0.9 * np.power(np.maximum(en, 1e-300), -0.2))
        fac = np.where(acc, np.clip(fac, 0.2, 5.0), np.clip(fac, 0.1, 0.9))
        fac = np.where(np.isfinite(fac), fac, 0.1)
        h[idx] = hi * fac
        steps[idx] += 1

        a = idx[acc]
        if a.size:
            ai = np.nonzero(acc)[0]
            t_a, h_a = ti[ai], hi[ai]
            found = _scan_steps(region, t_a, h_a, xi[ai], fi[ai], x_new[ai], f_new[ai], tol.subsamples, tol.crossing_tol)
            if found is not None:
                rows, tc, pc, sg, fn = found
                crosses.append((a[rows], tc, pc, sg, _patch_ids(region, mesh, pc, fn)))
            for tau in out_times:
                sel = (t_a < tau) & (t_a + h_a >= tau)
                if np.any(sel):
                    th = (tau - t_a[sel]) / h_a[sel]
                    pos, _ = _hermite(th, h_a[sel], xi[ai][sel], fi[ai][sel], x_new[ai][sel], f_new[ai][sel])
                    positions[float(tau)][a[sel]] = pos
            t[a] = t_a + h_a
            x[a] = x_new[ai]
            fa, na = field(t[a], x[a])
            f[a] = fa
            node_steps[a] += na
            if record:
                for r, i in enumerate(a):
                    samples[i].append((t[i], x[i].copy(), f[i].copy()))
            gnew = _boundary(region, x[a])
            outside = np.any(gnew >= 0, axis=1)
            ever_out[a] |= outside
            done_h = t[a] >= t_stop - 1e-12 * max(1.0, abs(t_stop))
            done_far = outside & (np.max(gnew, axis=1) > far) & (t[a] >= last_out)
            status[a[done_far]] = STATUS_FAR
            status[a[done_h]] = STATUS_HORIZON
            bad_dom = ~field.in_domain(x[a])
            status[a[bad_dom & ~done_h]] = STATUS_DOMAIN
        stalled = idx[node_steps[idx] > tol.node_stall_steps]
        status[stalled[status[stalled] == STATUS_RUNNING]] = STATUS_NODE
        over = idx[steps[idx] >= tol.max_steps]
        status[over[status[over] == STATUS_RUNNING]] = STATUS_MAXSTEPS
        alive = status == STATUS_RUNNING

    if crosses:
        cr = np.concatenate([c[0] for c in crosses])
        ct = np.concatenate([c[1] for c in crosses])
        cp = np.concatenate([c[2] for c in crosses])
        cs = np.concatenate([c[3] for c in crosses])
        cpatch = np.concatenate([c[4] for c in crosses])
        order = np.lexsort((ct, cr))
        cr, ct, cp, cs, cpatch = cr[order], ct[order], cp[order], cs[order], cpatch[order]
    else:
        cr = np.zeros(0, dtype=int)
        ct = np.zeros(0)
        cp = np.zeros((0, d))
        cs = np.zeros(0, dtype=int)
        cpatch = np.zeros(0, dtype=int)
    return _BlockResult(status, t, x, cr, ct, cp, cs, cpatch, positions, samples, steps)


# --------------------------------------------------------------------------
# single trajectories


def integrate_trajectory(x0, e: Evolution, T: float, tol: Tolerances | None = None, G=None, out_times=()) -> Trajectory:
    """Adaptive solution of the guidance equation from ``x0`` over [t0, t0 + T].

    When a region ``G`` is given, crossings are recorded during
    integration; otherwise the trajectory runs to the horizon.
    """
    tol = tol or Tolerances()
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.size != e.dim:
        raise InvalidParameter(f"x0 has {x0.size} components, evolution is {e.dim}D")
    field_ = VelocityField(e, tol.node_eps)
    if not field_.in_domain(x0[None])[0]:
        raise InvalidParameter("x0 outside the evolution domain")
    region = G if G is not None else _NoBoundary(e.dim)
    mesh = region_mesh(G) if isinstance(G, Ball) else None
    tol_run = tol if G is not None else Tolerances(**{**tol.__dict__, "far_margin": math.inf})
    res = _integrate_block(x0[None], field_, region, mesh, e.t0, T, tol_run, out_times, record=True)
    samp = res.samples[0]
    tr = Trajectory(
        x0,
        np.array([s[0] for s in samp]),
        np.array([s[1] for s in samp]),
        np.array([s[2] for s in samp]),
        STATUS_NAMES[int(res.status[0])],
        positions={tau: p[0] for tau, p in res.positions.items()},
    )
    if G is not None:
        tr.crossings = [Crossing(int(p), float(t), int(s), pos) for t, s, p, pos in zip(res.cross_time, res.cross_sign, res.cross_patch, res.cross_pos)]
    return tr


class _NoBoundary:
    def __init__(self, dim):
        self.dim = dim
        self.radius = math.inf

    def boundary_functions(self, x):
        return np.full((len(np.atleast_2d(x)), 1), -math.inf)

    def normals(self, x, which=None):
        return np.zeros_like(np.atleast_2d(x))


def detect_crossings(tr: Trajectory, G, mesh=None, tol: Tolerances | None = None) -> list:
    """Signed boundary crossings along a recorded trajectory, in time order."""
    tol = tol or Tolerances()
    if len(tr.t) < 2:
        return []
    mesh = mesh if mesh is not None else (region_mesh(G) if isinstance(G, Ball) else None)
    h = np.diff(tr.t)
    found = _scan_steps(G, tr.t[:-1], h, tr.x[:-1], tr.v[:-1], tr.x[1:], tr.v[1:], tol.subsamples, tol.crossing_tol)
    if found is None:
        return []
    rows, tc, pc, sg, fn = found
    patches = _patch_ids(G, mesh, pc, fn)
    return [Crossing(int(p), float(t), int(s), pos) for t, s, p, pos in zip(tc, sg, patches, pc)]


def first_exit(tr: Trajectory, G, crossings=None) -> ExitEvent:
    """First time the trajectory is outside G (time zero if it starts outside)."""
    if not np.all(G.contains(tr.x0[None])):
        return ExitEvent(float(tr.t[0]), tr.x0.copy(), -1)
    crossings = tr.crossings if crossings is None else crossings
    for c in crossings:
        if c.sign > 0:
            return ExitEvent(c.time, c.position, c.patch)
    return ExitEvent(None, None, -1)


# --------------------------------------------------------------------------
# ensembles


@dataclass
class EnsembleResult:
    count: int
    seed: int
    t0: float
    horizon: float
    region: object
    x0: np.ndarray
    status: np.ndarray
    exit_time: np.ndarray  # nan when no exit within the horizon
    exit_pos: np.ndarray
    exit_patch: np.ndarray
    cross_traj: np.ndarray
    cross_time: np.ndarray
    cross_sign: np.ndarray
    cross_patch: np.ndarray
    cross_pos: np.ndarray
    positions: dict
    failed: int

    @property
    def exited(self) -> np.ndarray:
        return np.isfinite(self.exit_time)

    def crossing_counts(self, edges, groups: PatchGroups):
        """(N_plus, N_minus) totals per (group, time bin)."""
        g, b = _bin_crossings(self, edges, groups)
        ok = b >= 0
        shape = (groups.size, len(edges) - 1)
        plus = np.zeros(shape, dtype=int)
        minus = np.zeros(shape, dtype=int)
        np.add.at(plus, (g[ok & (self.cross_sign > 0)], b[ok & (self.cross_sign > 0)]), 1)
        np.add.at(minus, (g[ok & (self.cross_sign < 0)], b[ok & (self.cross_sign < 0)]), 1)
        return plus, minus


def run_ensemble(psi0, e: Evolution, G, N: int, seed: int, horizon: float, tol: Tolerances | None = None, *, threads: int = 1, block: int = 1024, out_times=(), max_outside: float = 1e-4, max_failed: float = 0.01) -> EnsembleResult:
    """Quantum-equilibrium ensemble of N trajectories with exits and crossings.

    Initial positions are drawn from |psi0|^2 with ``seed``; ``threads``
    only changes scheduling, never results.
    """
    tol = tol or Tolerances()
    if N < 1:
        raise InvalidParameter("ensemble size must be >= 1")
    outside = 1.0 - region_mass(psi0, G)
    if outside > max_outside:
        raise InvalidSetup(f"initial mass outside the region is {outside:.2e} > {max_outside:.1e}")
    x0 = sample_positions(psi0, N, seed)
    field_ = VelocityField(e, tol.node_eps)
    mesh = region_mesh(G) if isinstance(G, Ball) else None
    starts = list(range(0, N, block))

    def work(lo):
        return _integrate_block(x0[lo : lo + block], field_, G, mesh, e.t0, horizon, tol, out_times)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(lo) for lo in starts]

    status = np.concatenate([p.status for p in parts])
    cr = np.concatenate([p.cross_row + lo for p, lo in zip(parts, starts)])
    ct = np.concatenate([p.cross_time for p in parts])
    cs = np.concatenate([p.cross_sign for p in parts])
    cpatch = np.concatenate([p.cross_patch for p in parts])
    cpos = np.concatenate([p.cross_pos for p in parts]).reshape(-1, e.dim)
    positions = {tau: np.concatenate([p.positions[tau] for p in parts]) for tau in parts[0].positions}

    exit_time = np.full(N, np.nan)
    exit_pos = np.full((N, e.dim), np.nan)
    exit_patch = np.full(N, -1)
    start_out = ~G.contains(x0)
    exit_time[start_out] = e.t0
    exit_pos[start_out] = x0[start_out]
    if cr.size:
        first = np.ones(cr.size, dtype=bool)
        first[1:] = cr[1:] != cr[:-1]
        fo = first & (cs > 0) & ~start_out[cr]
        exit_time[cr[fo]] = ct[fo]
        exit_pos[cr[fo]] = cpos[fo]
        exit_patch[cr[fo]] = cpatch[fo]

    failed = int(np.isin(status, FAILED).sum())
    if failed:
        names = {STATUS_NAMES[s]: int((status == s).sum()) for s in FAILED if (status == s).any()}
        log.warning("ensemble: %d failed trajectories %s", failed, names)
    if failed > max_failed * N:
        raise EnsembleError(f"{failed} of {N} trajectories failed")
    return EnsembleResult(N, seed, e.t0, horizon, G, x0, status, exit_time, exit_pos, exit_patch, cr, ct, cs, cpatch, cpos, positions, failed)


def _bin_index(times, edges):
    b = np.searchsorted(edges, times, side="right") - 1
    b = np.where(times == edges[-1], len(edges) - 2, b)
    return np.where((b >= 0) & (b < len(edges) - 1), b, -1)


def _bin_crossings(r: EnsembleResult, edges, groups):
    edges = np.asarray(edges, dtype=float)
    b = _bin_index(r.cross_time, edges)
    g = groups.assign(r.cross_pos) if r.cross_time.size else np.zeros(0, dtype=int)
    if isinstance(r.region, Interval):
        g = r.cross_patch
    return g, b


def _proportion_se(p, n):
    """Binomial standard error; empty bins use one pseudo-count."""
    pf = np.maximum(p, 1.0 / n)
    return np.sqrt(pf * (1 - np.minimum(pf, 1.0)) / n) if n > 1 else np.ones_like(p)


@dataclass
class CrossingMeasures:
    edges: np.ndarray
    mean_n: np.ndarray  # E(N) per (group, bin)
    mean_ns: np.ndarray  # E(N_s)
    se_n: np.ndarray
    se_ns: np.ndarray


def estimate_crossing_measures(r: EnsembleResult, edges, groups: PatchGroups) -> CrossingMeasures:
    """Empirical E(N) and E(N_s) per (group, time bin) with standard errors."""
    edges = np.asarray(edges, dtype=float)
    G, B = groups.size, len(edges) - 1
    g, b = _bin_crossings(r, edges, groups)
    ok = b >= 0
    key = r.cross_traj[ok] * (G * B) + g[ok] * B + b[ok]
    s = r.cross_sign[ok]
    n = r.count
    tot = np.zeros(G * B)
    tot_s = np.zeros(G * B)
    sq = np.zeros(G * B)
    sq_s = np.zeros(G * B)
    if key.size:
        uk, inv = np.unique(key, return_inverse=True)
        cnt = np.bincount(inv, minlength=uk.size).astype(float)
        sgn = np.bincount(inv, weights=s, minlength=uk.size)
        cell = uk % (G * B)
        np.add.at(tot, cell, cnt)
        np.add.at(tot_s, cell, sgn)
        np.add.at(sq, cell, cnt**2)
        np.add.at(sq_s, cell, sgn**2)
    mean_n, mean_ns = tot / n, tot_s / n
    var_n = np.maximum(sq / n - mean_n**2, 0.0)
    var_ns = np.maximum(sq_s / n - mean_ns**2, 0.0)
    floor = 1.0 / n
    se_n = np.maximum(np.sqrt(var_n / max(n - 1, 1)), floor)
    se_ns = np.maximum(np.sqrt(var_ns / max(n - 1, 1)), floor)
    shape = (G, B)
    return CrossingMeasures(edges, mean_n.reshape(shape), mean_ns.reshape(shape), se_n.reshape(shape), se_ns.reshape(shape))


def _first_exit_counts(r: EnsembleResult, edges, groups):
    edges = np.asarray(edges, dtype=float)
    ex = r.exited
    b = _bin_index(r.exit_time[ex], edges)
    if isinstance(r.region, Interval):
        g = np.where(r.exit_pos[ex][:, 0] < 0.5 * (r.region.a + r.region.b), 0, 1)
    else:
        g = groups.assign(r.exit_pos[ex]) if ex.any() else np.zeros(0, dtype=int)
    counts = np.zeros((groups.size, len(edges) - 1))
    ok = b >= 0
    np.add.at(counts, (g[ok], b[ok]), 1)
    return counts


@dataclass
class TruncatedCurrent:
    edges: np.ndarray
    probability: np.ndarray  # first exits per (group, bin) / N
    se: np.ndarray
    rate: np.ndarray  # probability / (bin width * group area)
    rate_se: np.ndarray


def truncated_current(r: EnsembleResult, edges, groups: PatchGroups) -> TruncatedCurrent:
    """Empirical truncated current: first exits only, per unit time and area."""
    edges = np.asarray(edges, dtype=float)
    p = _first_exit_counts(r, edges, groups) / r.count
    se = _proportion_se(p, r.count)
    norm = np.outer(groups.areas(), np.diff(edges))
    return TruncatedCurrent(edges, p, se, p / norm, se / norm)


@dataclass
class ExitStatistics:
    edges: np.ndarray
    joint: np.ndarray  # P(group, bin)
    joint_se: np.ndarray
    time_marginal: np.ndarray
    time_se: np.ndarray
    position_marginal: np.ndarray
    position_se: np.ndarray
    exited_fraction: float


def exit_statistics(r: EnsembleResult, edges, groups: PatchGroups) -> ExitStatistics:
    """Joint histogram of (exit group, exit time bin), normalized by N, with marginals."""
    edges = np.asarray(edges, dtype=float)
    n = r.count
    joint = _first_exit_counts(r, edges, groups) / n
    tm = joint.sum(axis=0)
    pm = joint.sum(axis=1)
    return ExitStatistics(
        edges,
        joint,
        _proportion_se(joint, n),
        tm,
        _proportion_se(tm, n),
        pm,
        _proportion_se(pm, n),
        float(r.exited.mean()),
    )


# --------------------------------------------------------------------------
# CSV output (17 significant digits; 1D rows leave y, z empty)


def _xyz(p) -> list:
    p = list(p) + [None] * (3 - len(p))
    return ["" if v is None else fmt(v) for v in p]


def write_exits(path, r: EnsembleResult):
    """``traj_id,t_e,x,y,z,patch_id``; empty fields when no exit."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("traj_id,t_e,x,y,z,patch_id\n")
        for i in range(r.count):
            if np.isfinite(r.exit_time[i]):
                fh.write(",".join([str(i), fmt(r.exit_time[i]), *_xyz(r.exit_pos[i]), str(int(r.exit_patch[i]))]) + "\n")
            else:
                fh.write(f"{i},,,,,\n")


def write_crossings(path, traj, time, sign, patch):
    """``traj_id,time,sign,patch_id`` ordered by trajectory then time."""
    order = np.lexsort((time, traj))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("traj_id,time,sign,patch_id\n")
        for k in order:
            fh.write(f"{int(traj[k])},{fmt(time[k])},{int(sign[k])},{int(patch[k])}\n")


def write_trajectories(path, trajectories, decimate: int = 1):
    """``traj_id,t,x,y,z``, keeping every ``decimate``-th step and the last one."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("traj_id,t,x,y,z\n")
        for i, tr in enumerate(trajectories):
            keep = list(range(0, len(tr.t), decimate))
            if keep[-1] != len(tr.t) - 1:
                keep.append(len(tr.t) - 1)
            for k in keep:
                fh.write(",".join([str(i), fmt(tr.t[k]), *_xyz(tr.x[k])]) + "\n")
