"""Probability current, boundary flux and the probabilities built from it.

Sphere meshes are Gauss-Legendre in cos(theta) times uniform phi about a
chosen polar axis. Each node owns the cell between consecutive partial sums
of the Gauss-Legendre weights, so a patch's area equals its quadrature
weight exactly. Zones (caps and polar bands) get their own meshes, which
keeps flux through a cap spectrally accurate instead of depending on how
node cells straddle the cap edge.

Grid states are evaluated through their exact trigonometric interpolant, and
region masses of grid states are computed from the Fourier coefficients of
|psi|^2 on a doubled grid, so the continuity balance is limited only by the
surface quadrature.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_simpson, simpson
from scipy.special import ndtr, spherical_jn

from .errors import InvalidParameter, InvalidSetup, OutOfDomain
from .evolve import Evolution
from .state import AnalyticState, GaussianState, GridState, MomentumState, fourier_coefficients, spectral_fields

# --------------------------------------------------------------------------
# regions and meshes


@dataclass(frozen=True)
class Ball:
    center: tuple
    radius: float

    def __post_init__(self):
        c = tuple(float(v) for v in np.atleast_1d(self.center))
        if len(c) != 3:
            raise InvalidParameter("ball center must be a 3-vector")
        if not self.radius > 0:
            raise InvalidParameter(f"ball radius must be > 0, got {self.radius}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "radius", float(self.radius))

    dim = 3

    def boundary_functions(self, x):
        """Signed distances (M, 1); positive outside."""
        return (np.linalg.norm(np.atleast_2d(x) - np.array(self.center), axis=1) - self.radius)[:, None]

    def normals(self, x, which=None):
        d = np.atleast_2d(x) - np.array(self.center)
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    def contains(self, x):
        return self.boundary_functions(x)[:, 0] < 0


@dataclass(frozen=True)
class Interval:
    a: float
    b: float

    def __post_init__(self):
        if not self.a < self.b:
            raise InvalidParameter(f"interval needs a < b, got ({self.a}, {self.b})")
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "b", float(self.b))

    dim = 1

    def boundary_functions(self, x):
        """(M, 2): left endpoint ``a - x``, right endpoint ``x - b``."""
        x = np.atleast_2d(x)[:, 0]
        return np.stack([self.a - x, x - self.b], axis=1)

    def normals(self, x, which):
        return np.where(np.asarray(which)[:, None] == 0, -1.0, 1.0)

    def contains(self, x):
        x = np.atleast_2d(x)[:, 0]
        return (x > self.a) & (x < self.b)


def _frame(axis):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    helper = np.array([1.0, 0, 0]) if abs(axis[0]) < 0.9 else np.array([0, 1.0, 0])
    e1 = np.cross(helper, axis)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    return e1, e2, axis


@dataclass(frozen=True, eq=False)
class SurfaceMesh:
    """Boundary patches: centroid, outward unit normal, area weight."""

    points: np.ndarray
    normals: np.ndarray
    weights: np.ndarray
    center: np.ndarray
    radius: float
    axis: np.ndarray | None = None
    cos_edges: np.ndarray | None = None
    n_phi: int = 0

    @property
    def size(self) -> int:
        return len(self.weights)

    def patch_of(self, x) -> np.ndarray:
        """Index of the patch cell containing each point (projected radially); -1 if none."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.axis is None:
            return np.where(x[:, 0] < 0.5 * (self.points[0, 0] + self.points[1, 0]), 0, 1)
        e1, e2, ax = _frame(self.axis)
        u = x - self.center
        u = u / np.linalg.norm(u, axis=1, keepdims=True)
        ct = u @ ax
        phi = np.mod(np.arctan2(u @ e2, u @ e1), 2 * np.pi)
        i = np.searchsorted(self.cos_edges, ct, side="right") - 1
        i = np.where(ct == self.cos_edges[-1], len(self.cos_edges) - 2, i)
        dphi = 2 * np.pi / self.n_phi
        j = np.floor(phi / dphi + 0.5).astype(int) % self.n_phi
        ok = (i >= 0) & (i < len(self.cos_edges) - 1)
        return np.where(ok, i * self.n_phi + j, -1)


def sphere_mesh(ball: Ball, n_theta=32, n_phi=64, axis=(0, 0, 1), cos_range=(-1.0, 1.0)) -> SurfaceMesh:
    c0, c1 = cos_range
    if not -1 <= c0 < c1 <= 1:
        raise InvalidParameter(f"bad cos(theta) range {cos_range}")
    xi, w = np.polynomial.legendre.leggauss(n_theta)
    half = 0.5 * (c1 - c0)
    ct = c0 + half * (xi + 1)
    w = w * half
    edges = np.concatenate([[c0], c0 + np.cumsum(w)])
    edges[-1] = c1
    phi = 2 * np.pi * np.arange(n_phi) / n_phi
    e1, e2, ax = _frame(axis)
    st = np.sqrt(np.clip(1 - ct**2, 0, None))
    CT, PH = np.meshgrid(ct, phi, indexing="ij")
    ST = np.sqrt(np.clip(1 - CT**2, 0, None))
    dirs = (ST * np.cos(PH))[..., None] * e1 + (ST * np.sin(PH))[..., None] * e2 + CT[..., None] * ax
    dirs = dirs.reshape(-1, 3)
    R = ball.radius
    weights = (R**2 * np.repeat(w, n_phi) * (2 * np.pi / n_phi)).ravel()
    del st
    return SurfaceMesh(np.array(ball.center) + R * dirs, dirs, weights, np.array(ball.center), R, ax, edges, n_phi)


def interval_mesh(G: Interval) -> SurfaceMesh:
    return SurfaceMesh(
        np.array([[G.a], [G.b]]),
        np.array([[-1.0], [1.0]]),
        np.ones(2),
        np.array([0.5 * (G.a + G.b)]),
        0.5 * (G.b - G.a),
    )


def region_mesh(G, n_theta=32, n_phi=64) -> SurfaceMesh:
    return sphere_mesh(G, n_theta, n_phi) if isinstance(G, Ball) else interval_mesh(G)


# --------------------------------------------------------------------------
# solid angles


@dataclass(frozen=True)
class Zone:
    """Directions with cos_lo <= u.axis <= cos_hi; a cap when cos_hi == 1."""

    axis: tuple = (0.0, 0.0, 1.0)
    cos_lo: float = -1.0
    cos_hi: float = 1.0

    def __post_init__(self):
        ax = np.asarray(self.axis, dtype=float)
        if ax.shape != (3,) or not np.linalg.norm(ax) > 0:
            raise InvalidParameter("zone axis must be a nonzero 3-vector")
        if not -1 <= self.cos_lo < self.cos_hi <= 1:
            raise InvalidParameter("zone needs -1 <= cos_lo < cos_hi <= 1")
        object.__setattr__(self, "axis", tuple(ax / np.linalg.norm(ax)))

    @property
    def measure(self) -> float:
        return 2 * np.pi * (self.cos_hi - self.cos_lo)

    def contains(self, directions) -> np.ndarray:
        u = np.atleast_2d(directions)
        c = (u @ np.array(self.axis)) / np.linalg.norm(u, axis=1)
        return (c >= self.cos_lo) & (c <= self.cos_hi)

    def complement(self):
        if self.cos_hi == 1:
            return Zone(self.axis, -1.0, self.cos_lo)
        if self.cos_lo == -1:
            return Zone(self.axis, self.cos_hi, 1.0)
        raise InvalidParameter("complement of a band is not a zone")

    def mesh(self, ball: Ball, n_theta=32, n_phi=64) -> SurfaceMesh:
        return sphere_mesh(ball, n_theta, n_phi, self.axis, (self.cos_lo, self.cos_hi))


def cap(axis, half_angle: float) -> Zone:
    """Spherical cap of directions within ``half_angle`` (radians) of ``axis``."""
    if not 0 < half_angle <= np.pi:
        raise InvalidParameter("cap half-angle must be in (0, pi]")
    return Zone(tuple(axis), float(np.cos(half_angle)) if half_angle < np.pi else -1.0, 1.0)


FULL_SPHERE = Zone()


@dataclass(frozen=True)
class Side:
    """1D solid-angle analogue: ``left``, ``right`` or ``both``."""

    which: str = "both"

    def __post_init__(self):
        if self.which not in ("left", "right", "both"):
            raise InvalidParameter(f"side must be left, right or both, got {self.which!r}")

    @property
    def measure(self) -> float:
        return 2.0 if self.which == "both" else 1.0

    def complement(self):
        return Side({"left": "right", "right": "left"}[self.which])

    def mesh(self, G: Interval) -> SurfaceMesh:
        m = interval_mesh(G)
        if self.which == "both":
            return m
        k = 0 if self.which == "left" else 1
        return SurfaceMesh(m.points[k : k + 1], m.normals[k : k + 1], m.weights[k : k + 1], m.center, m.radius)


@dataclass(frozen=True)
class PatchSet:
    """Explicit patches of a base mesh."""

    base: SurfaceMesh
    ids: tuple

    @property
    def measure(self) -> float:
        return float(self.base.weights[list(self.ids)].sum() / self.base.radius**2)

    def mesh(self, *_args, **_kw) -> SurfaceMesh:
        ids = np.asarray(self.ids, dtype=int)
        b = self.base
        return SurfaceMesh(b.points[ids], b.normals[ids], b.weights[ids], b.center, b.radius)


# --------------------------------------------------------------------------
# currents and fluxes


def _fields(s, x, t=None):
    if isinstance(s, AnalyticState):
        return s.fields(x, t)
    if not np.all(s.spec.contains(x)):
        raise OutOfDomain("evaluation points leave the grid domain")
    return spectral_fields(s, x)


def current_at(s, x, t=None) -> np.ndarray:
    """j = (1/m) Im(conj(psi) grad psi) at points ``x`` (M, d)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    psi, grad = _fields(s, x, t)
    return (np.conj(psi)[:, None] * grad).imag / s.mass


@dataclass
class FluxValues:
    per_patch: np.ndarray
    total: float


def flux_density(s, mesh: SurfaceMesh, t=None) -> np.ndarray:
    """Outward normal current j.n at each patch centroid."""
    return np.einsum("md,md->m", current_at(s, mesh.points, t), mesh.normals)


def flux_through(s, mesh: SurfaceMesh) -> FluxValues:
    per = flux_density(s, mesh) * mesh.weights
    return FluxValues(per, float(per.sum()))


def _flux_matrix(e: Evolution, mesh: SurfaceMesh, times) -> np.ndarray:
    """Per-patch flux (T, P) at the given absolute times."""
    times = np.asarray(times, dtype=float)
    P = mesh.size
    out = np.empty((len(times), P))
    if e.is_analytic:
        chunk = max(1, 200_000 // P)
        for lo in range(0, len(times), chunk):
            ts = times[lo : lo + chunk]
            pts = np.tile(mesh.points, (len(ts), 1))
            tt = np.repeat(ts, P)
            j = current_at(e.initial, pts, tt)
            fd = np.einsum("md,md->m", j, np.tile(mesh.normals, (len(ts), 1)))
            out[lo : lo + len(ts)] = fd.reshape(len(ts), P) * mesh.weights
        return out
    for i, t in enumerate(times):
        out[i] = flux_through(e.state_at(t), mesh).per_patch
    return out


@dataclass
class FluxSeries:
    times: np.ndarray
    per_patch: np.ndarray
    totals: np.ndarray
    cumulative: np.ndarray
    mesh: SurfaceMesh | None = None


def _cumulative(y, t):
    if len(t) < 3:
        return np.concatenate([[0.0], np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(t))])
    return cumulative_simpson(y, x=t, initial=0.0)


def flux_series(e: Evolution, mesh: SurfaceMesh, times) -> FluxSeries:
    times = np.asarray(times, dtype=float)
    per = _flux_matrix(e, mesh, times)
    totals = per.sum(axis=1)
    return FluxSeries(times, per, totals, _cumulative(totals, times), mesh)


# --------------------------------------------------------------------------
# region masses


def _ball_transform(k, R):
    kr = k * R
    small = kr < 1e-3
    with np.errstate(divide="ignore", invalid="ignore"):
        big = spherical_jn(1, kr) / kr
    series = 1 / 3 - kr**2 / 30
    return 4 * np.pi * R**3 * np.where(small, series, big)


def _density_coefficients(s: GridState):
    """Fourier coefficients of |psi|^2 on the doubled grid, exact for the interpolant."""
    spec = s.spec
    c = fourier_coefficients(s)
    n = spec.n
    big = tuple(2 * nk for nk in n)
    pad = np.zeros(big, dtype=complex)
    sel_src, sel_dst = [], []
    for nk in n:
        idx = np.fft.fftfreq(nk, 1.0 / nk).astype(int)
        sel_src.append(np.arange(nk))
        sel_dst.append(np.mod(idx, 2 * nk))
    pad[np.ix_(*sel_dst)] = c[np.ix_(*sel_src)]
    fine = np.fft.ifftn(pad) * np.prod(big)
    r = np.fft.fftn(np.abs(fine) ** 2) / np.prod(big)
    ks = [2 * np.pi * np.fft.fftfreq(2 * nk, Lk / (2 * nk)) for nk, Lk in zip(n, spec.L)]
    return r, ks


def region_mass(s, G) -> float:
    """Probability inside ``G``."""
    if isinstance(s, GridState):
        r, ks = _density_coefficients(s)
        origin = s.spec.origin
        if isinstance(G, Ball):
            rel = np.array(G.center) - origin
            K = np.meshgrid(*ks, indexing="ij", sparse=True)
            kmag = np.sqrt(sum(k**2 for k in K))
            phase = np.exp(1j * sum(k * c for k, c in zip(K, rel)))
            return float(np.real(np.sum(r * phase * _ball_transform(kmag, G.radius))))
        k = ks[0]
        a, b = G.a - origin[0], G.b - origin[0]
        with np.errstate(divide="ignore", invalid="ignore"):
            w = (np.exp(1j * k * b) - np.exp(1j * k * a)) / (1j * k)
        w[k == 0] = b - a
        return float(np.real(np.sum(r * w)))
    if isinstance(G, Ball):
        return _analytic_ball_mass(s, G)
    xs, ws = _panel_rule(G.a, G.b, 64, 16)
    return float(np.sum(np.abs(s.psi(xs[:, None])) ** 2 * ws))


def _panel_rule(lo, hi, panels, order):
    xi, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(lo, hi, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[1:] + edges[:-1])
    xs = (mid[:, None] + half[:, None] * xi).ravel()
    ws = (half[:, None] * w).ravel()
    return xs, ws


def _analytic_ball_mass(s, G: Ball, n_theta=32, n_phi=64) -> float:
    unit = sphere_mesh(Ball(G.center, 1.0), n_theta, n_phi)
    rs, wr = _panel_rule(0.0, G.radius, 16, 16)
    total = 0.0
    for r, w in zip(rs, wr):
        pts = np.array(G.center) + r * unit.normals
        total += w * r**2 * np.sum(np.abs(s.psi(pts)) ** 2 * unit.weights)
    return float(total)


# --------------------------------------------------------------------------
# continuity and exit-time density


def continuity_terms(e: Evolution, G, t: float, delta: float = 1e-4, n_theta=32, n_phi=64):
    """(d/dt mass in G, outward boundary flux) at time ``t``.

    The time derivative is a centred difference over +-``delta`` using the
    evolution's own short-time propagator.
    """
    s = e.state_at(t)
    dm = (region_mass(e.nudge(s, delta), G) - region_mass(e.nudge(s, -delta), G)) / (2 * delta)
    flux = flux_through(s, region_mesh(G, n_theta, n_phi)).total
    return dm, flux


def continuity_residual(e: Evolution, G, t: float, delta: float = 1e-4, n_theta=32, n_phi=64) -> float:
    """|d/dt int_G |psi|^2 + flux through the boundary of G| at ``t``."""
    dm, flux = continuity_terms(e, G, t, delta, n_theta, n_phi)
    return abs(dm + flux)


def _check_inside(e: Evolution, G, max_outside):
    outside = 1.0 - region_mass(e.initial, G)
    if outside > max_outside:
        raise InvalidSetup(f"initial mass outside the region is {outside:.2e} > {max_outside:.1e}")
    return outside


def exit_time_density(e: Evolution, G, times, n_theta=32, n_phi=64, max_outside=1e-4) -> FluxSeries:
    """Total outward boundary flux rho(t) on ``times`` with its cumulative integral."""
    _check_inside(e, G, max_outside)
    return flux_series(e, region_mesh(G, n_theta, n_phi), times)


def _gaussian_exit_shape(m, sigma, R, t):
    t = np.asarray(t, dtype=float)
    u2 = 1 + (t / (2 * m * sigma**2)) ** 2
    return R**3 * t * u2**-2.5 * np.exp(-(R**2) / (2 * sigma**2 * u2))


@functools.lru_cache(maxsize=64)
def _gaussian_exit_table(m, sigma, R):
    tau = 2 * m * sigma**2
    logt = np.linspace(math.log(tau * 1e-8), math.log(tau * 1e8), 40001)
    t = np.exp(logt)
    y = _gaussian_exit_shape(m, sigma, R, t) * t
    cum = cumulative_simpson(y, x=logt, initial=0.0)
    Z = cum[-1]
    return logt, cum / Z, Z


def gaussian_exit_density_analytic(m, sigma, R, t):
    """Exit-time density of a centred free Gaussian from a ball of radius R.

    Shape R^3 t u^-5 exp(-R^2 / (2 sigma^2 u^2)), u^2 = 1 + (t/(2 m sigma^2))^2,
    normalized numerically to unit integral over [0, inf).
    """
    if not (m > 0 and sigma > 0 and R > 0):
        raise InvalidParameter("m, sigma and R must be positive")
    _, _, Z = _gaussian_exit_table(float(m), float(sigma), float(R))
    return _gaussian_exit_shape(m, sigma, R, t) / Z


def gaussian_exit_cdf_analytic(m, sigma, R, t):
    logt, cdf, _ = _gaussian_exit_table(float(m), float(sigma), float(R))
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore"):
        lt = np.log(np.maximum(t, 0.0))
    return np.interp(lt, logt, cdf, left=0.0, right=1.0)


# --------------------------------------------------------------------------
# current positivity


@dataclass
class CPCReport:
    holds: bool
    violations: list = field(default_factory=list)  # (t, patch, value)
    max_flux_density: float = 0.0


def check_cpc(e: Evolution, G, times, tol: float = 0.0, n_theta=32, n_phi=64) -> CPCReport:
    """Flag boundary points where j.n < -tol * max|j.n| over the sampled set."""
    mesh = region_mesh(G, n_theta, n_phi)
    times = np.asarray(times, dtype=float)
    dens = _flux_matrix(e, mesh, times) / mesh.weights
    peak = float(np.abs(dens).max()) if dens.size else 0.0
    if math.isinf(tol):
        return CPCReport(True, [], peak)
    bad = np.argwhere(dens < -tol * peak)
    violations = [(float(times[i]), int(p), float(dens[i, p])) for i, p in bad]
    return CPCReport(not violations, violations, peak)


# --------------------------------------------------------------------------
# cross sections


@dataclass
class SigmaFlux:
    value: float
    remainder: float


def _time_grid(e: Evolution, T, dt):
    if e.is_analytic:
        n = max(2, int(math.ceil(T / dt)))
        n += n % 2
        return e.t0 + np.linspace(0.0, T, n + 1)
    ft = e.frame_times()
    ts = ft[ft <= e.t0 + T + 1e-9]
    if ts[-1] < e.t0 + T - 1e-9:
        raise InvalidParameter(f"evolution frames end at {ts[-1]}, before horizon {e.t0 + T}")
    return ts


def _angle_mesh(Sigma, R, center, n_theta, n_phi):
    if isinstance(Sigma, Side):
        return Sigma.mesh(Interval(center[0] - R, center[0] + R))
    return Sigma.mesh(Ball(center, R), n_theta, n_phi)


def _default_center(e_or_dim):
    d = e_or_dim if isinstance(e_or_dim, int) else e_or_dim.dim
    return tuple([0.0] * d)


def sigma_flux(e: Evolution, Sigma, R: float, T: float, center=None, dt=0.05, n_theta=32, n_phi=64) -> SigmaFlux:
    """Time-integrated outward flux through the part of the radius-R sphere in ``Sigma``.

    The remainder is the probability still inside the sphere at t0 + T.
    """
    center = _default_center(e) if center is None else tuple(center)
    mesh = _angle_mesh(Sigma, R, center, n_theta, n_phi)
    times = _time_grid(e, T, dt)
    totals = _flux_matrix(e, mesh, times).sum(axis=1)
    value = float(simpson(totals, x=times)) if len(times) > 2 else float(np.trapz(totals, times))
    G = Interval(center[0] - R, center[0] + R) if e.dim == 1 else Ball(center, R)
    remainder = region_mass(e.state_at(times[-1]), G)
    return SigmaFlux(value, remainder)


def _cone_weights(points, spacing, Sigma, apex, sub=4):
    """Fraction of each grid cell inside the cone over ``Sigma`` (subsampled near the edge)."""
    rel = points - apex
    if rel.shape[1] == 1:
        x = rel[:, 0]
        half = 0.5 * spacing[0]
        if Sigma.which == "both":
            return np.ones(len(x))
        sgn = 1.0 if Sigma.which == "right" else -1.0
        return np.clip((sgn * x + half) / (2 * half), 0.0, 1.0)
    ax = np.array(Sigma.axis)
    r = np.linalg.norm(rel, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        ang = np.arccos(np.clip((rel @ ax) / r, -1, 1))
    lo_ang = math.acos(Sigma.cos_hi)
    hi_ang = math.acos(Sigma.cos_lo)
    inside = (ang >= lo_ang) & (ang <= hi_ang)
    w = inside.astype(float)
    reach = 0.5 * np.linalg.norm(spacing)
    with np.errstate(divide="ignore"):
        slack = np.where(r > 0, np.arcsin(np.clip(reach / np.maximum(r, 1e-300), 0, 1)), np.pi)
    edge_lo = (lo_ang > 0) & (np.abs(ang - lo_ang) <= slack)
    edge_hi = (hi_ang < np.pi) & (np.abs(ang - hi_ang) <= slack)
    near = np.nonzero(edge_lo | edge_hi | (r <= reach))[0]
    if near.size:
        offs = (np.arange(sub) + 0.5) / sub - 0.5
        grid = np.stack(np.meshgrid(offs, offs, offs, indexing="ij"), axis=-1).reshape(-1, 3) * spacing
        for lo in range(0, near.size, 4096):
            idx = near[lo : lo + 4096]
            sp = rel[idx][:, None, :] + grid[None]
            w[idx] = Sigma.contains(sp.reshape(-1, 3)).reshape(len(idx), -1).mean(axis=1)
    return w


def _radial_cone_integral(density, Sigma, apex, rmax, n_theta=32, n_phi=64, panels=64, order=8):
    """int over the cone of density(x) d^3x by radial panels x zone mesh."""
    unit = Sigma.mesh(Ball(apex, 1.0), n_theta, n_phi)
    rs, wr = _panel_rule(0.0, rmax, panels, order)
    total = 0.0
    for lo in range(0, len(rs), 16):
        r = rs[lo : lo + 16]
        pts = np.array(apex) + (r[:, None, None] * unit.normals[None]).reshape(-1, 3)
        vals = density(pts).reshape(len(r), -1) @ unit.weights
        total += float(np.sum(vals * r**2 * wr[lo : lo + 16]))
    return total


def _analytic_extent(s) -> float:
    packets = s.packets if hasattr(s, "packets") else (s,)
    return max(np.linalg.norm(g.center()) + 12 * g.width() for g in packets)


def sigma_cone(e: Evolution, Sigma, t: float, apex=None) -> float:
    """Probability in the cone over ``Sigma`` at time ``t``."""
    apex = _default_center(e) if apex is None else tuple(apex)
    s = e.state_at(t)
    if isinstance(s, GridState):
        w = _cone_weights(s.spec.points(), s.spec.h, Sigma, np.array(apex))
        return float(np.sum(s.density().ravel() * w) * s.spec.cell_volume)
    if isinstance(Sigma, Side):
        lo, hi = {"left": (-np.inf, apex[0]), "right": (apex[0], np.inf), "both": (-np.inf, np.inf)}[Sigma.which]
        ext = _analytic_extent(s)
        xs, ws = _panel_rule(max(lo, -ext), min(hi, ext), 128, 16)
        return float(np.sum(np.abs(s.psi(xs[:, None])) ** 2 * ws))
    return _radial_cone_integral(lambda x: np.abs(s.psi(x)) ** 2, Sigma, apex, _analytic_extent(s) + np.linalg.norm(apex))


def momentum_cone_probability(ms, Sigma) -> float:
    """Probability that the momentum lies in the cone over ``Sigma`` (apex p = 0)."""
    if isinstance(ms, MomentumState):
        pts = ms.points()
        w = _cone_weights(pts, ms.spec.dp, Sigma, np.zeros(ms.spec.dim))
        return float(np.sum(np.abs(ms.amplitudes.ravel()) ** 2 * w) * np.prod(ms.spec.dp))
    if not isinstance(ms, AnalyticState):
        raise InvalidParameter("momentum_cone_probability needs a MomentumState or analytic state")
    packets = ms.packets if hasattr(ms, "packets") else (ms,)
    pext = max(np.linalg.norm(g.p0) + 12 / (2 * g.sigma) for g in packets)
    dens = lambda p: np.abs(ms.momentum_amplitude(p)) ** 2  # noqa: E731
    if isinstance(Sigma, Side):
        lo, hi = {"left": (-pext, 0.0), "right": (0.0, pext), "both": (-pext, pext)}[Sigma.which]
        xs, ws = _panel_rule(lo, hi, 64, 16)
        return float(np.sum(dens(xs[:, None]) * ws))
    return _radial_cone_integral(dens, Sigma, (0.0, 0.0, 0.0), pext)


def gaussian_cone_probability(mean, std, Sigma) -> float:
    """Closed form: isotropic normal N(mean, std^2 I) inside the cone over ``Sigma``.

    For a zone the mean must lie along the zone axis; the cap probability
    reduces to Phi(mu/s) - cos(a) exp(-mu^2 sin^2(a) / 2s^2) Phi(mu cos(a)/s).
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    if isinstance(Sigma, Side):
        mu = mean[0]
        right = float(ndtr(mu / std))
        return {"right": right, "left": 1 - right, "both": 1.0}[Sigma.which]
    ax = np.array(Sigma.axis)
    mu = float(mean @ ax)
    perp = np.linalg.norm(mean - mu * ax)
    if perp > 1e-12 * (abs(mu) + std):
        raise InvalidParameter("closed form needs the mean on the zone axis")

    def cap_prob(alpha, mu):
        if alpha <= 0:
            return 0.0
        if alpha >= np.pi:
            return 1.0
        if alpha > np.pi / 2:
            return 1.0 - cap_prob(np.pi - alpha, -mu)
        ca, sa = math.cos(alpha), math.sin(alpha)
        return float(ndtr(mu / std) - ca * math.exp(-(mu**2) * sa**2 / (2 * std**2)) * ndtr(mu * ca / std))

    return cap_prob(math.acos(Sigma.cos_lo), mu) - cap_prob(math.acos(Sigma.cos_hi), mu)


@dataclass
class FastRow:
    R: float
    lhs: float
    rhs: float
    abs_err: float
    remainder: float


def verify_fast(psi0, Sigma, radii, T, V=None, *, dt=0.05, dt_frame=None, wave_T=None, n_theta=32, n_phi=64, center=None):
    """Time-integrated flux through R*Sigma versus the momentum-cone probability.

    Free analytic states use exact evolution for the flux and the closed
    form (when applicable) for the momentum side. Grid states are evolved
    spectrally, or split-step with ``V``; with ``V`` the momentum side uses
    the finite-time out-state.
    """
    from .evolve import evolve, wave_operator_out
    from .state import to_momentum

    interacting = V is not None and not V.is_zero
    if isinstance(psi0, AnalyticState):
        if interacting:
            raise InvalidParameter("interacting FAST needs a grid initial state")
        e = evolve(psi0, "analytic-free", T)
        rhs = _analytic_momentum_cone(psi0, Sigma)
    else:
        method = "split-step" if interacting else "spectral-free"
        e = evolve(psi0, method, T, dt=dt, dt_frame=dt_frame, potential=V)
        if interacting:
            out = wave_operator_out(psi0, V, wave_T or T, dt)
            rhs = momentum_cone_probability(to_momentum(out), Sigma)
        else:
            rhs = momentum_cone_probability(to_momentum(psi0), Sigma)
    rows = []
    for R in radii:
        sf = sigma_flux(e, Sigma, R, T, center=center, dt=dt, n_theta=n_theta, n_phi=n_phi)
        rows.append(FastRow(float(R), sf.value, rhs, abs(sf.value - rhs), sf.remainder))
    return rows


def _analytic_momentum_cone(psi0, Sigma):
    if isinstance(psi0, GaussianState):
        try:
            return gaussian_cone_probability(psi0.p0, 1 / (2 * psi0.sigma), Sigma)
        except InvalidParameter:
            pass
    return momentum_cone_probability(psi0, Sigma)


# --------------------------------------------------------------------------
# patch groups and binned predictions


@dataclass(frozen=True, eq=False)
class PatchGroups:
    """Partition of a region boundary into groups (polar zones or interval ends)."""

    region: object
    zones: tuple = ()

    @property
    def size(self) -> int:
        return 2 if isinstance(self.region, Interval) else len(self.zones)

    def assign(self, positions, which=None) -> np.ndarray:
        positions = np.atleast_2d(positions)
        if isinstance(self.region, Interval):
            mid = 0.5 * (self.region.a + self.region.b)
            return np.where(positions[:, 0] < mid, 0, 1)
        u = positions - np.array(self.region.center)
        ct = (u @ np.array(self.zones[0].axis)) / np.linalg.norm(u, axis=1)
        edges = np.array([z.cos_lo for z in self.zones] + [self.zones[-1].cos_hi])
        g = np.searchsorted(edges, ct, side="right") - 1
        return np.clip(g, 0, len(self.zones) - 1)

    def meshes(self, n_theta=16, n_phi=64) -> list:
        if isinstance(self.region, Interval):
            return [Side("left").mesh(self.region), Side("right").mesh(self.region)]
        return [z.mesh(self.region, n_theta, n_phi) for z in self.zones]

    def areas(self) -> np.ndarray:
        if isinstance(self.region, Interval):
            return np.ones(2)
        return np.array([z.measure for z in self.zones]) * self.region.radius**2


def polar_bands(ball: Ball, n_bands=8, axis=(0, 0, 1)) -> PatchGroups:
    """Equal-area bands in cos(theta) about ``axis``, ordered from the south pole."""
    edges = np.linspace(-1.0, 1.0, n_bands + 1)
    zones = tuple(Zone(tuple(axis), float(edges[i]), float(edges[i + 1])) for i in range(n_bands))
    return PatchGroups(ball, zones)


def endpoint_groups(G: Interval) -> PatchGroups:
    return PatchGroups(G)


def default_groups(G, n_bands=8) -> PatchGroups:
    return polar_bands(G, n_bands) if isinstance(G, Ball) else endpoint_groups(G)


def _bin_time_grid(edges, sub):
    edges = np.asarray(edges, dtype=float)
    pieces = [np.linspace(edges[i], edges[i + 1], 2 * sub + 1)[:-1] for i in range(len(edges) - 1)]
    return np.concatenate(pieces + [edges[-1:]])


def binned_flux(e: Evolution, groups: PatchGroups, edges, sub=8, n_theta=16, n_phi=64) -> np.ndarray:
    """(groups, bins) array of integral over bin and group of j.dS dt (Simpson per bin)."""
    edges = np.asarray(edges, dtype=float)
    ts = _bin_time_grid(edges, sub)
    nb = len(edges) - 1
    out = np.empty((groups.size, nb))
    for g, mesh in enumerate(groups.meshes(n_theta, n_phi)):
        tot = _flux_matrix(e, mesh, ts).sum(axis=1)
        for b in range(nb):
            seg = slice(2 * sub * b, 2 * sub * (b + 1) + 1)
            out[g, b] = simpson(tot[seg], x=ts[seg])
    return out


@dataclass
class TruncatedFlux1D:
    times: np.ndarray
    flux: np.ndarray  # (T, 2) outward flux at (left, right)
    net: np.ndarray  # (T, 2) cumulative net outward flux
    first_exit: np.ndarray  # (T, 2) cumulative first-exit probability

    def binned(self, edges) -> np.ndarray:
        """(2, bins) first-exit probability per bin."""
        F = np.stack([np.interp(edges, self.times, self.first_exit[:, k]) for k in range(2)])
        return np.diff(F, axis=1)


def truncated_flux_1d(e: Evolution, G: Interval, t_end: float, dt: float = 1e-3) -> TruncatedFlux1D:
    """Truncated current of a 1D evolution without trajectories.

    Bohmian trajectories on a line keep their order, so the particle on the
    right endpoint b at time t carries the label q = mass left of b. It is
    leaving G for the first time exactly when the cumulative outward flux
    through b reaches a new running maximum. The left end is symmetric.
    """
    n = max(2, int(math.ceil((t_end - e.t0) / dt)))
    n += n % 2
    times = e.t0 + np.linspace(0.0, t_end - e.t0, n + 1)
    per = _flux_matrix(e, interval_mesh(G), times)
    net = np.stack([_cumulative(per[:, k], times) for k in range(2)], axis=1)
    first = np.maximum.accumulate(np.maximum(net, 0.0), axis=0)
    return TruncatedFlux1D(times, per, net, first)
