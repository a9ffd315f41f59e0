"""Wavefunctions: analytic Gaussian families, gridded amplitudes, momentum space.

Units throughout are hbar = 1 with an explicit mass. The Fourier convention is

    psi_hat(p) = (2 pi)^(-d/2) * integral exp(-i p.x) psi(x) dx,

so that integrals of |psi_hat|^2 over momentum sets are probabilities.

Analytic states are finite sums of complex Gaussians
``exp(-A |x|^2 + B.x + C)`` (A scalar with Re A > 0), a family closed under
free evolution, which gives exact amplitudes, gradients and momentum
amplitudes at any time.
"""
from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import InvalidParameter, InvalidState, OutOfDomain, TruncationError

CHECKPOINT_MAGIC = b"QFX1"
NORM_TOL = 1e-9


# --------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class GridSpec:
    """Regular periodic grid on ``[-L_k/2, L_k/2)`` per axis, axis order x, y, z."""

    n: tuple
    L: tuple

    def __post_init__(self):
        n = tuple(int(v) for v in np.atleast_1d(self.n))
        L = tuple(float(v) for v in np.atleast_1d(self.L))
        if len(n) == 1 and len(L) > 1:
            n = n * len(L)
        if len(L) == 1 and len(n) > 1:
            L = L * len(n)
        if len(n) not in (1, 3) or len(n) != len(L):
            raise InvalidParameter(f"grid must be 1D or 3D with matching n and L, got n={n}, L={L}")
        for nk in n:
            if nk < 8 or nk & (nk - 1):
                raise InvalidParameter(f"grid point counts must be powers of two >= 8, got {nk}")
        for Lk in L:
            if not Lk > 0:
                raise InvalidParameter(f"grid extents must be positive, got {Lk}")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "L", L)

    @property
    def dim(self) -> int:
        return len(self.n)

    @property
    def shape(self) -> tuple:
        return self.n

    @property
    def h(self) -> np.ndarray:
        return np.array(self.L) / np.array(self.n)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    @property
    def origin(self) -> np.ndarray:
        return -0.5 * np.array(self.L)

    def axes(self) -> list:
        return [-Lk / 2 + np.arange(nk) * (Lk / nk) for nk, Lk in zip(self.n, self.L)]

    def k_axes(self) -> list:
        """Wavenumbers in FFT order."""
        return [2 * np.pi * np.fft.fftfreq(nk, Lk / nk) for nk, Lk in zip(self.n, self.L)]

    def p_axes(self) -> list:
        """Conjugate momentum grid in increasing order, ``[-pi n/L, pi n/L)``."""
        return [np.fft.fftshift(k) for k in self.k_axes()]

    @property
    def dp(self) -> np.ndarray:
        return 2 * np.pi / np.array(self.L)

    def points(self) -> np.ndarray:
        """All grid nodes as an ``(N, d)`` array, last axis fastest."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def k_squared(self) -> np.ndarray:
        ks = np.meshgrid(*self.k_axes(), indexing="ij", sparse=True)
        return sum(k**2 for k in ks)

    def contains(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        lo = self.origin
        return np.all((x >= lo) & (x < -lo), axis=-1)


# --------------------------------------------------------------------------
# analytic states


def _gaussian_params(x0, p0, sigma):
    """Complex-Gaussian coefficients (A, B, C) of the normalized packet at t = 0."""
    d = x0.size
    A = 1.0 / (4 * sigma**2) + 0j
    B = x0 / (2 * sigma**2) + 1j * p0
    C = -(x0 @ x0) / (4 * sigma**2) - 1j * (p0 @ x0) - 0.25 * d * math.log(2 * math.pi * sigma**2)
    return A, B, C


def _evolve_params(A, B, C, mass, dt):
    """Free evolution of exp(-A x^2 + B.x + C) by ``dt`` (scalar or array)."""
    dt = np.asarray(dt, dtype=float)
    d = B.shape[-1]
    z = 1 + 2j * A * dt / mass
    At = A / z
    Bt = B / z[..., None]
    Ct = C + (B @ B) / (4 * A) * (1 - 1 / z) - 0.5 * d * np.log(z)
    return At, Bt, Ct


class AnalyticState:
    """Finite superposition of free complex Gaussians at time ``t``.

    Subclasses provide ``_components`` as a list of ``(coef, A, B, C)`` at
    t = 0; the state at any time follows from exact free evolution.
    """

    mass: float
    t: float

    @property
    def dim(self) -> int:
        return self._components[0][2].size

    def at_time(self, t):
        return replace(self, t=float(t))

    def log_terms(self, x, t=None):
        """Per-component log amplitudes ``(K, M)`` and their gradients ``(K, M, d)``.

        ``t`` may be a scalar or one time per point.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = self.t if t is None else t
        r2 = np.einsum("md,md->m", x, x)
        logs, grads = [], []
        for coef, A, B, C in self._components:
            At, Bt, Ct = _evolve_params(A, B, C, self.mass, t)
            Bt = np.broadcast_to(Bt, x.shape)
            logs.append(np.log(coef) - At * r2 + np.einsum("md,md->m", Bt, x) + Ct)
            grads.append(-2 * np.asarray(At)[..., None] * x + Bt)
        return np.array(logs), np.array(grads)

    def fields(self, x, t=None):
        """Amplitude ``(M,)`` and gradient ``(M, d)`` at points ``x``."""
        logs, grads = self.log_terms(x, t)
        e = np.exp(logs)
        return e.sum(axis=0), np.einsum("km,kmd->md", e, grads)

    def log_density_and_velocity(self, x, t=None):
        """log |psi|^2 and Bohmian velocity, computed without underflow."""
        logs, grads = self.log_terms(x, t)
        shift = logs.real.max(axis=0)
        w = np.exp(logs - shift)
        s = w.sum(axis=0)
        g = np.einsum("km,kmd->md", w, grads)
        with np.errstate(divide="ignore", invalid="ignore"):
            v = (g / s[:, None]).imag / self.mass
            logrho = 2 * shift + 2 * np.log(np.abs(s))
        return logrho, v

    def psi(self, x):
        return self.fields(x)[0]

    def momentum_amplitude(self, p):
        """psi_hat(p) at the state's time."""
        p = np.atleast_2d(np.asarray(p, dtype=float))
        d = p.shape[-1]
        total = np.zeros(p.shape[0], dtype=complex)
        for coef, A, B, C in self._components:
            q = B[None, :] - 1j * p
            total += coef * (2 * A) ** (-d / 2) * np.exp(np.einsum("md,md->m", q, q) / (4 * A) + C)
        return total * np.exp(-1j * np.einsum("md,md->m", p, p) * self.t / (2 * self.mass))

    def norm2(self) -> float:
        total = 0j
        d = self.dim
        for ci, Ai, Bi, Ci in self._components:
            for cj, Aj, Bj, Cj in self._components:
                a = np.conj(Ai) + Aj
                b = np.conj(Bi) + Bj
                total += np.conj(ci) * cj * (np.pi / a) ** (d / 2) * np.exp(b @ b / (4 * a) + np.conj(Ci) + Cj)
        return float(total.real)


@dataclass(frozen=True, eq=False)
class GaussianState(AnalyticState):
    """Isotropic Gaussian packet; ``x0``, ``p0``, ``sigma`` describe it at t = 0.

    At time ``t`` the density is normal with mean ``x0 + p0 t/m`` and
    per-axis standard deviation ``width(t) = sigma*sqrt(1 + (t/(2 m sigma^2))^2)``.
    """

    x0: np.ndarray
    p0: np.ndarray
    sigma: float
    mass: float = 1.0
    t: float = 0.0

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float)).copy()
        p0 = np.atleast_1d(np.asarray(self.p0, dtype=float)).copy()
        if p0.size == 1 and x0.size > 1:
            p0 = np.full_like(x0, p0[0])
        if x0.size == 1 and p0.size > 1:
            x0 = np.full_like(p0, x0[0])
        if x0.size not in (1, 3) or x0.shape != p0.shape:
            raise InvalidParameter("x0 and p0 must be 1- or 3-vectors of equal length")
        if not self.sigma > 0:
            raise InvalidParameter(f"sigma must be > 0, got {self.sigma}")
        if not self.mass > 0:
            raise InvalidParameter(f"mass must be > 0, got {self.mass}")
        x0.flags.writeable = False
        p0.flags.writeable = False
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "p0", p0)
        object.__setattr__(self, "sigma", float(self.sigma))
        object.__setattr__(self, "mass", float(self.mass))
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "_components", [(1.0 + 0j, *_gaussian_params(x0, p0, self.sigma))])

    def center(self, t=None):
        t = self.t if t is None else t
        return self.x0 + self.p0 * t / self.mass

    def width(self, t=None):
        t = self.t if t is None else t
        return self.sigma * math.sqrt(1 + (t / (2 * self.mass * self.sigma**2)) ** 2)

    def peak_density(self) -> float:
        return (2 * math.pi * self.width() ** 2) ** (-self.dim / 2)


@dataclass(frozen=True, eq=False)
class GaussianSuperposition(AnalyticState):
    """Normalized ``sum_k c_k g_k`` of Gaussian packets sharing mass and time."""

    packets: tuple
    coefficients: tuple

    def __post_init__(self):
        packets = tuple(self.packets)
        coefs = tuple(complex(c) for c in self.coefficients)
        if not packets or len(packets) != len(coefs):
            raise InvalidParameter("need one coefficient per packet")
        if len({g.dim for g in packets}) != 1 or len({g.mass for g in packets}) != 1:
            raise InvalidParameter("packets must share dimension and mass")
        if len({g.t for g in packets}) != 1:
            raise InvalidParameter("packets must share time")
        object.__setattr__(self, "packets", packets)
        comps = [(c, *g._components[0][1:]) for c, g in zip(coefs, packets)]
        object.__setattr__(self, "_components", comps)
        norm = math.sqrt(AnalyticState.norm2(self))
        if not norm > 0:
            raise InvalidParameter("superposition has zero norm")
        coefs = tuple(c / norm for c in coefs)
        object.__setattr__(self, "coefficients", coefs)
        object.__setattr__(self, "_components", [(c, *g._components[0][1:]) for c, g in zip(coefs, packets)])

    @property
    def mass(self):
        return self.packets[0].mass

    @property
    def t(self):
        return self.packets[0].t

    def at_time(self, t):
        return GaussianSuperposition(tuple(g.at_time(t) for g in self.packets), self.coefficients)

    def peak_density(self) -> float:
        amp = sum(abs(c) * (2 * math.pi * g.width() ** 2) ** (-g.dim / 4) for c, g in zip(self.coefficients, self.packets))
        return amp**2


def make_gaussian(x0, p0, sigma, mass=1.0) -> GaussianState:
    """Normalized Gaussian packet at t = 0 (closed-form unit norm)."""
    return GaussianState(x0, p0, sigma, mass, 0.0)


# --------------------------------------------------------------------------
# gridded states


@dataclass(frozen=True, eq=False)
class GridState:
    spec: GridSpec
    amplitudes: np.ndarray
    t: float = 0.0
    mass: float = 1.0
    normalized: bool = True
    renorm: float = 1.0  # factor applied by ``discretize``

    def __post_init__(self):
        if not self.mass > 0:
            raise InvalidParameter(f"mass must be > 0, got {self.mass}")
        a = np.array(self.amplitudes, dtype=np.complex128).reshape(self.spec.shape)
        a.flags.writeable = False
        object.__setattr__(self, "amplitudes", a)
        object.__setattr__(self, "t", float(self.t))
        if self.normalized and abs(self.norm2() - 1) > NORM_TOL:
            raise InvalidState(f"state flagged normalized has norm^2 {self.norm2()!r}")

    @property
    def dim(self) -> int:
        return self.spec.dim

    def norm2(self) -> float:
        return float(np.sum(np.abs(self.amplitudes) ** 2) * self.spec.cell_volume)

    def density(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    def with_amplitudes(self, amplitudes, t=None, normalized=None):
        return GridState(
            self.spec,
            amplitudes,
            self.t if t is None else t,
            self.mass,
            self.normalized if normalized is None else normalized,
        )


@dataclass(frozen=True, eq=False)
class MomentumState:
    """Momentum amplitudes on the conjugate grid, increasing-p order."""

    spec: GridSpec
    amplitudes: np.ndarray
    t: float = 0.0
    mass: float = 1.0

    def norm2(self) -> float:
        return float(np.sum(np.abs(self.amplitudes) ** 2) * np.prod(self.spec.dp))

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.spec.p_axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


def _coverage_ok(g: GaussianState, spec: GridSpec, t=0.0) -> bool:
    c = g.center(t)
    s = g.width(t)
    half = 0.5 * np.array(spec.L)
    pmax = np.pi / spec.h
    pos_ok = np.all(c - 8 * s >= -half) and np.all(c + 8 * s <= half)
    mom_ok = np.all(np.abs(g.p0) + 8 / (2 * g.sigma) <= pmax)
    return bool(pos_ok and mom_ok)


def discretize(g: AnalyticState, spec: GridSpec, max_defect: float = 1e-6) -> GridState:
    """Sample an analytic state on ``spec`` and renormalize.

    The norm defect before renormalization is reported as ``1 - renorm**-2``
    through the returned state's ``renorm`` factor. A defect above
    ``max_defect`` raises :class:`TruncationError`.
    """
    if g.dim != spec.dim:
        raise InvalidParameter(f"state is {g.dim}D but grid is {spec.dim}D")
    if isinstance(g, GaussianState) and not _coverage_ok(g, spec, g.t):
        warnings.warn("grid does not cover 8 standard deviations of the packet", RuntimeWarning, stacklevel=2)
    amps = g.psi(spec.points()).reshape(spec.shape)
    norm2 = float(np.sum(np.abs(amps) ** 2) * spec.cell_volume)
    defect = abs(norm2 - 1.0)
    if defect > max_defect:
        raise TruncationError(f"grid truncates the state: norm defect {defect:.3e} > {max_defect:.1e}")
    factor = 1.0 / math.sqrt(norm2)
    state = GridState(spec, amps * factor, g.t, g.mass, True, factor)
    return state


def norm_defect(s: GridState) -> float:
    """|norm^2 - 1| of the sampled state before renormalization."""
    return abs(s.renorm**-2 - 1.0)


# --------------------------------------------------------------------------
# transforms


def _axis_phase(spec: GridSpec, sign: float):
    """Outer-product phase exp(sign * i k x_start) in FFT order."""
    phases = [np.exp(sign * 1j * k * x0) for k, x0 in zip(spec.k_axes(), spec.origin)]
    out = phases[0]
    for ph in phases[1:]:
        out = np.multiply.outer(out, ph)
    return out


def to_momentum(s: GridState) -> MomentumState:
    spec = s.spec
    d = spec.dim
    scale = spec.cell_volume / (2 * np.pi) ** (d / 2)
    a = np.fft.fftn(s.amplitudes) * _axis_phase(spec, -1.0) * scale
    return MomentumState(spec, np.fft.fftshift(a), s.t, s.mass)


def from_momentum(ms: MomentumState, normalized: bool = True) -> GridState:
    spec = ms.spec
    d = spec.dim
    scale = spec.cell_volume / (2 * np.pi) ** (d / 2)
    a = np.fft.ifftn(np.fft.ifftshift(ms.amplitudes) * _axis_phase(spec, 1.0) / scale)
    return GridState(spec, a, ms.t, ms.mass, normalized)


def fourier_coefficients(s: GridState, drop_nyquist: bool = True) -> np.ndarray:
    """Coefficients c_k with psi(x) = sum_k c_k exp(i k (x - x_start)), FFT order."""
    c = np.fft.fftn(s.amplitudes) / s.amplitudes.size
    if drop_nyquist:
        for axis, nk in enumerate(s.spec.n):
            idx = [slice(None)] * s.spec.dim
            idx[axis] = nk // 2
            c[tuple(idx)] = 0.0
    return c


def _trim_modes(c, ks, rel_tol=1e-16):
    """Restrict coefficients to the bounding box of non-negligible modes."""
    cmax = np.abs(c).max()
    if cmax == 0:
        return c[tuple(slice(0, 1) for _ in ks)], [k[:1] for k in ks]
    order = [np.argsort(k) for k in ks]
    c = c[np.ix_(*order)]
    ks = [k[o] for k, o in zip(ks, order)]
    mag = np.abs(c)
    keep = []
    for axis in range(c.ndim):
        other = tuple(a for a in range(c.ndim) if a != axis)
        prof = mag.max(axis=other) if other else mag
        idx = np.nonzero(prof > rel_tol * cmax)[0]
        keep.append(slice(idx[0], idx[-1] + 1))
    return c[tuple(keep)], [k[s] for k, s in zip(ks, keep)]


def trig_eval(c, ks, x, gradient=True, chunk=256):
    """Evaluate sum_k c_k exp(i k.x) and its gradient at points ``x`` (M, d).

    Separable contraction, one axis at a time; cost is O(N_modes * M).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    M, d = x.shape
    val = np.empty(M, dtype=complex)
    grad = np.empty((M, d), dtype=complex) if gradient else None
    if d == 1:
        k = ks[0]
        for lo in range(0, M, chunk * 16):
            sl = slice(lo, lo + chunk * 16)
            E = np.exp(1j * np.outer(x[sl, 0], k))
            val[sl] = E @ c
            if gradient:
                grad[sl, 0] = E @ (1j * k * c)
        return val, grad
    n1, n2, n3 = c.shape
    k1, k2, k3 = ks
    flat = c.reshape(n1 * n2, n3)
    flat_dz = (c * (1j * k3)).reshape(n1 * n2, n3)
    for lo in range(0, M, chunk):
        sl = slice(lo, lo + chunk)
        xs = x[sl]
        E1 = np.exp(1j * np.outer(k1, xs[:, 0]))
        E2 = np.exp(1j * np.outer(k2, xs[:, 1]))
        E3 = np.exp(1j * np.outer(k3, xs[:, 2]))
        Az = (flat @ E3).reshape(n1, n2, -1)
        By = np.einsum("xym,ym->xm", Az, E2)
        val[sl] = np.einsum("xm,xm->m", By, E1)
        if gradient:
            grad[sl, 0] = np.einsum("xm,xm->m", By, (1j * k1)[:, None] * E1)
            Byy = np.einsum("xym,ym->xm", Az, (1j * k2)[:, None] * E2)
            grad[sl, 1] = np.einsum("xm,xm->m", Byy, E1)
            Azz = (flat_dz @ E3).reshape(n1, n2, -1)
            Bzz = np.einsum("xym,ym->xm", Azz, E2)
            grad[sl, 2] = np.einsum("xm,xm->m", Bzz, E1)
    return val, grad


def spectral_fields(s: GridState, x, gradient=True):
    """Exact trigonometric interpolant of a grid state (and gradient) at ``x``."""
    c, ks = _trim_modes(fourier_coefficients(s), s.spec.k_axes())
    return trig_eval(c, ks, np.atleast_2d(x) - s.spec.origin, gradient)


def spectral_gradient(s: GridState) -> np.ndarray:
    """Gradient on the grid nodes, shape ``(d, *shape)``; Nyquist modes dropped."""
    c = np.fft.fftn(s.amplitudes)
    out = []
    for axis, k in enumerate(s.spec.k_axes()):
        k = k.copy()
        k[len(k) // 2] = 0.0
        shape = [1] * s.dim
        shape[axis] = -1
        out.append(np.fft.ifftn(c * (1j * k).reshape(shape)))
    return np.array(out)


# --------------------------------------------------------------------------
# point evaluation


def evaluate(s, x, method: str = "linear"):
    """Amplitude at points ``x`` (shape ``(M, d)`` or a single point).

    Analytic states use their closed form. Grid states use periodic
    multilinear interpolation (``method="linear"``) or the exact
    trigonometric interpolant (``method="spectral"``).
    """
    single = np.ndim(x) <= 1 and not (np.ndim(x) == 1 and s.dim == 1 and np.size(x) > 1)
    pts = np.asarray(x, dtype=float).reshape(-1, s.dim)
    if isinstance(s, AnalyticState):
        out = s.psi(pts)
    else:
        if not np.all(s.spec.contains(pts)):
            raise OutOfDomain("point outside the grid domain")
        if method == "spectral":
            out = spectral_fields(s, pts, gradient=False)[0]
        elif method == "linear":
            out = interpolate_linear(s.spec, s.amplitudes, pts)
        else:
            raise InvalidParameter(f"unknown interpolation method {method!r}")
    return out[0] if single else out


def _corner_weights(spec: GridSpec, pts):
    """Periodic multilinear stencil: (index tuples, weights) for 2^d corners."""
    u = (pts - spec.origin) / spec.h
    i0 = np.floor(u).astype(np.int64)
    f = u - i0
    corners = []
    for bits in range(2 ** spec.dim):
        idx, w = [], np.ones(len(pts))
        for axis in range(spec.dim):
            b = (bits >> axis) & 1
            idx.append((i0[:, axis] + b) % spec.n[axis])
            w = w * (f[:, axis] if b else 1 - f[:, axis])
        corners.append((tuple(idx), w))
    return corners


def interpolate_linear(spec: GridSpec, field, pts):
    """Multilinear interpolation of ``field`` (shape ``(..., *spec.shape)``)."""
    out = 0
    for idx, w in _corner_weights(spec, pts):
        out = out + field[(Ellipsis, *idx)] * w
    return out


# --------------------------------------------------------------------------
# sampling


def _check_normalized(s):
    n2 = s.norm2()
    if abs(n2 - 1) > NORM_TOL:
        raise InvalidState(f"sampling needs a normalized state, norm^2 = {n2!r}")


def sample_positions(s, count: int, seed: int) -> np.ndarray:
    """i.i.d. positions from |psi|^2, shape ``(count, d)``; deterministic in ``seed``."""
    if count < 1:
        raise InvalidParameter("count must be >= 1")
    _check_normalized(s)
    rng = np.random.default_rng(seed)
    d = s.dim
    if isinstance(s, GaussianState):
        return s.center() + s.width() * rng.standard_normal((count, d))
    if isinstance(s, GaussianSuperposition):
        return _sample_superposition(s, count, rng)
    p = (np.abs(s.amplitudes) ** 2).ravel()
    p = p / p.sum()
    idx = rng.choice(p.size, size=count, p=p)
    nodes = np.stack(np.unravel_index(idx, s.spec.shape), axis=-1) * s.spec.h + s.spec.origin
    x = nodes + (rng.random((count, d)) - 0.5) * s.spec.h
    half = 0.5 * np.array(s.spec.L)
    return (x + half) % (2 * half) - half


def _sample_superposition(s: GaussianSuperposition, count, rng):
    # envelope K * sum |c_k|^2 |g_k|^2 >= |sum c_k g_k|^2 (Cauchy-Schwarz)
    coefs = np.array(s.coefficients)
    K = len(coefs)
    w = np.abs(coefs) ** 2
    w = w / w.sum()
    out = np.empty((0, s.dim))
    while len(out) < count:
        m = 2 * (count - len(out)) * K + 16
        comp = rng.choice(K, size=m, p=w)
        centers = np.array([g.center() for g in s.packets])
        widths = np.array([g.width() for g in s.packets])
        x = centers[comp] + widths[comp][:, None] * rng.standard_normal((m, s.dim))
        target = np.abs(s.psi(x)) ** 2
        env = np.zeros(m)
        for c, g in zip(coefs, s.packets):
            env += abs(c) ** 2 * np.abs(g.psi(x)) ** 2
        env *= K
        accept = rng.random(m) * env < target
        out = np.concatenate([out, x[accept]])
    return out[:count]


# --------------------------------------------------------------------------
# checkpoints


def write_checkpoint(s: GridState, path) -> None:
    """Write a QFX1 checkpoint (little-endian, no padding)."""
    spec = s.spec
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", spec.dim)]
    for nk, Lk in zip(spec.n, spec.L):
        parts.append(struct.pack("<Qd", nk, Lk))
    parts.append(struct.pack("<dd", s.t, s.mass))
    parts.append(np.ascontiguousarray(s.amplitudes, dtype="<c16").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> GridState:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise InvalidState(f"{path}: not a QFX1 checkpoint")
    (dim,) = struct.unpack_from("<I", data, 4)
    off = 8
    n, L = [], []
    for _ in range(dim):
        nk, Lk = struct.unpack_from("<Qd", data, off)
        n.append(nk)
        L.append(Lk)
        off += 16
    t, mass = struct.unpack_from("<dd", data, off)
    off += 16
    spec = GridSpec(tuple(n), tuple(L))
    expected = off + 16 * int(np.prod(n))
    if len(data) != expected:
        raise InvalidState(f"{path}: expected {expected} bytes, found {len(data)}")
    amps = np.frombuffer(data, dtype="<c16", offset=off).reshape(spec.shape)
    state = GridState(spec, amps, t, mass, normalized=False)
    if abs(state.norm2() - 1) <= NORM_TOL:
        state = replace(state, normalized=True)
    return state
