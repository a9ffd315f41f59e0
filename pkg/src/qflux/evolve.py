"""Time propagation: exact free Gaussians, spectral free flow, Strang split-step.

Grid propagation is periodic and has no absorbing layer, so every stored
frame is checked against a grid-escape guard (mass reaching the outer 10%
of the box) before it is used for fluxes.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidParameter, InvalidState, ResolutionError
from .state import (
    AnalyticState,
    GridSpec,
    GridState,
    read_checkpoint,
    to_momentum,
    trig_eval,
    write_checkpoint,
)

log = logging.getLogger(__name__)

ESCAPE_MARGIN = 0.1
ESCAPE_TOL = 1e-6
NORM_DRIFT_TOL = 1e-9
ENERGY_DRIFT_TOL = 1e-4


@dataclass(frozen=True)
class Potential:
    """Built-in real potentials centred at ``center`` (origin by default).

    ``gaussian-bump``: V0 exp(-|x-c|^2 / (2 a^2)); ``square``: V0 inside
    |x-c| < a (a barrier for V0 > 0, a well for V0 < 0).
    """

    kind: str = "zero"
    V0: float = 0.0
    a: float = 1.0
    center: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("zero", "gaussian-bump", "square"):
            raise InvalidParameter(f"unknown potential {self.kind!r}")
        if self.kind != "zero" and not self.a > 0:
            raise InvalidParameter("potential range a must be > 0")
        if not math.isfinite(self.V0):
            raise InvalidParameter("V0 must be finite")

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero" or self.V0 == 0.0

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.is_zero:
            return np.zeros(len(x))
        c = np.zeros(x.shape[1]) if self.center is None else np.asarray(self.center, dtype=float)
        r2 = np.sum((x - c) ** 2, axis=1)
        if self.kind == "gaussian-bump":
            return self.V0 * np.exp(-r2 / (2 * self.a**2))
        return np.where(r2 < self.a**2, self.V0, 0.0)

    def on_grid(self, spec: GridSpec) -> np.ndarray:
        return self(spec.points()).reshape(spec.shape)


def evolve_gaussian(g: AnalyticState, t: float) -> AnalyticState:
    """Exact free evolution of an analytic state by ``t >= 0``."""
    if t < 0:
        raise InvalidParameter("evolve_gaussian needs t >= 0")
    return g.at_time(g.t + t)


def _kinetic_phase(spec: GridSpec, mass: float, dt: float) -> np.ndarray:
    return np.exp(-0.5j * spec.k_squared() * dt / mass)


def free_step_spectral(s: GridState, dt: float) -> GridState:
    """Multiply momentum amplitudes by exp(-i p^2 dt / 2m); any sign of dt."""
    if dt == 0:
        return s
    a = np.fft.ifftn(np.fft.fftn(s.amplitudes) * _kinetic_phase(s.spec, s.mass, dt))
    return GridState(s.spec, a, s.t + dt, s.mass, s.normalized)


def energy(s: GridState, V: Potential | None = None) -> float:
    ms = to_momentum(s)
    p2 = sum(p**2 for p in np.meshgrid(*s.spec.p_axes(), indexing="ij", sparse=True))
    kin = float(np.sum(np.abs(ms.amplitudes) ** 2 * p2) * np.prod(s.spec.dp)) / (2 * s.mass)
    pot = 0.0
    if V is not None and not V.is_zero:
        pot = float(np.sum(s.density() * V.on_grid(s.spec)) * s.spec.cell_volume)
    return kin + pot


def split_step(s: GridState, V: Potential, dt: float, steps: int, check: bool = True) -> GridState:
    """Strang splitting exp(-iV dt/2) exp(-iT dt) exp(-iV dt/2), applied ``steps`` times.

    Negative ``dt`` runs the same composition backwards. With ``check``
    the norm and energy drifts are compared against their tolerances.
    """
    if steps < 0:
        raise InvalidParameter("steps must be >= 0")
    if steps == 0 or dt == 0:
        return s
    e0 = energy(s, V) if check else None
    n0 = s.norm2()
    kin = _kinetic_phase(s.spec, s.mass, dt)
    psi = np.array(s.amplitudes)
    if V.is_zero:
        psi = np.fft.ifftn(np.fft.fftn(psi) * _kinetic_phase(s.spec, s.mass, dt * steps))
    else:
        Vg = V.on_grid(s.spec)
        half = np.exp(-0.5j * Vg * dt)
        full = half * half
        psi *= half
        for i in range(steps):
            psi = np.fft.ifftn(np.fft.fftn(psi) * kin)
            psi *= full if i < steps - 1 else half
    out = GridState(s.spec, psi, s.t + steps * dt, s.mass, normalized=False)
    if check:
        n1 = out.norm2()
        if abs(n1 - n0) > NORM_DRIFT_TOL * max(1.0, steps / 1000):
            raise ResolutionError(f"split-step norm drift {abs(n1 - n0):.2e}")
        e1 = energy(out, V)
        if abs(e1 - e0) > ENERGY_DRIFT_TOL * max(abs(e0), 1e-12):
            raise ResolutionError(f"split-step relative energy drift {abs(e1 - e0) / abs(e0):.2e}")
    if s.normalized and abs(out.norm2() - 1) <= 1e-9:
        out = GridState(s.spec, psi, out.t, s.mass, True)
    return out


def margin_mass(s: GridState, frac: float = ESCAPE_MARGIN) -> float:
    """Probability in the outer ``frac`` of the box along any axis."""
    inside = None
    for axis, x in enumerate(s.spec.axes()):
        lim = (0.5 - frac) * s.spec.L[axis]
        ok = np.abs(x) <= lim
        shape = [1] * s.dim
        shape[axis] = -1
        ok = ok.reshape(shape)
        inside = ok if inside is None else inside & ok
    rho = s.density()
    return float((rho.sum() - np.sum(rho * inside)) * s.spec.cell_volume)


def check_escape(s: GridState, tol: float = ESCAPE_TOL) -> None:
    m = margin_mass(s)
    if m > tol:
        raise ResolutionError(f"grid escape at t={s.t:g}: {m:.2e} of the mass in the outer margin")


def asymptotic_state(psi0, t: float, spec: GridSpec | None = None) -> GridState:
    """Long-time form (m/it)^(d/2) exp(i m x^2/2t) psi_hat(m x / t) sampled on a grid.

    ``t`` is the time elapsed since ``psi0``.
    """
    if not t > 0:
        raise InvalidParameter("asymptotic_state needs t > 0")
    if spec is None:
        if not isinstance(psi0, GridState):
            raise InvalidParameter("a grid is required for analytic initial states")
        spec = psi0.spec
    m = psi0.mass
    d = spec.dim
    x = spec.points()
    p = m * x / t
    if isinstance(psi0, AnalyticState):
        phat = psi0.momentum_amplitude(p)
    else:
        # continuous transform of the sampled function, exact for the grid data
        scale = psi0.spec.cell_volume / (2 * np.pi) ** (d / 2)
        phat, _ = trig_eval(psi0.amplitudes * scale, psi0.spec.axes(), -p, gradient=False)
    pref = (m / t) ** (d / 2) * np.exp(-0.25j * np.pi * d)
    amps = pref * np.exp(0.5j * m * np.sum(x**2, axis=1) / t) * phat
    return GridState(spec, amps.reshape(spec.shape), psi0.t + t, m, normalized=False)


def wave_operator_out(psi: GridState, V: Potential, T: float, dt: float) -> GridState:
    """Finite-T out-state exp(i H0 T) exp(-i H T) psi."""
    if not T > 0 or not dt > 0:
        raise InvalidParameter("wave_operator_out needs T > 0 and dt > 0")
    steps = int(round(T / dt))
    if abs(steps * dt - T) > 1e-9 * T:
        raise InvalidParameter("T must be an integer multiple of dt")
    fwd = split_step(psi, V, dt, steps)
    check_escape(fwd)
    out = free_step_spectral(fwd, -steps * dt)
    return GridState(psi.spec, out.amplitudes, psi.t, psi.mass, normalized=abs(out.norm2() - 1) <= 1e-9)


# --------------------------------------------------------------------------
# evolutions


METHODS = ("analytic-free", "spectral-free", "split-step")


class Evolution:
    """psi_t for t in [t0, t_end], analytic or as a store of grid frames.

    Grid frames sit at t0 + j*dt_frame. ``state_at`` is exact for analytic
    and spectral-free evolutions; for split-step it propagates from the
    preceding frame.
    """

    def __init__(self, initial, method, t_end, dt=None, dt_frame=None, potential=None, frames=None):
        self.initial = initial
        self.method = method
        self.t0 = initial.t
        self.t_end = float(t_end)
        self.dt = dt
        self.dt_frame = dt_frame
        self.potential = potential or Potential()
        self.frames = list(frames) if frames is not None else []
        self._grad_cache = {}

    @property
    def is_analytic(self) -> bool:
        return self.method == "analytic-free"

    @property
    def dim(self) -> int:
        return self.initial.dim

    @property
    def mass(self) -> float:
        return self.initial.mass

    @property
    def spec(self):
        return None if self.is_analytic else self.initial.spec

    def frame_times(self) -> np.ndarray:
        return np.array([f.t for f in self.frames])

    def state_at(self, t: float):
        if t < self.t0 - 1e-12 or t > self.t_end + 1e-9:
            raise InvalidParameter(f"t={t} outside evolution range [{self.t0}, {self.t_end}]")
        if self.is_analytic:
            return self.initial.at_time(t)
        if self.method == "spectral-free":
            return free_step_spectral(self.initial, t - self.t0)
        j = int(math.floor((t - self.t0) / self.dt_frame + 1e-9))
        j = min(j, len(self.frames) - 1)
        base = self.frames[j]
        rest = t - base.t
        if abs(rest) < 1e-12:
            return base
        n = int(math.floor(rest / self.dt + 1e-9))
        s = split_step(base, self.potential, self.dt, n, check=False)
        rem = t - s.t
        if rem > 1e-12:
            s = split_step(s, self.potential, rem, 1, check=False)
        return s

    def nudge(self, s, delta: float):
        """Propagate a state of this evolution by a short ``delta`` (either sign)."""
        if self.is_analytic:
            return s.at_time(s.t + delta)
        if self.method == "spectral-free" or self.potential.is_zero:
            return free_step_spectral(s, delta)
        return split_step(s, self.potential, delta, 1, check=False)

    def frame_gradient(self, j: int) -> np.ndarray:
        from .state import spectral_gradient

        if j not in self._grad_cache:
            self._grad_cache[j] = spectral_gradient(self.frames[j])
        return self._grad_cache[j]


def evolve(initial, method: str, T: float, dt=None, dt_frame=None, potential=None, guard=True, store=True):
    """Build an :class:`Evolution` of ``initial`` up to ``initial.t + T``.

    ``dt_frame`` defaults to ``10*dt``; for split-step it must be a multiple of ``dt``.
    """
    if method not in METHODS:
        raise InvalidParameter(f"unknown method {method!r}; choose from {METHODS}")
    if not T > 0:
        raise InvalidParameter("evolution horizon T must be > 0")
    t_end = initial.t + T
    potential = potential or Potential()
    if method == "analytic-free":
        if not isinstance(initial, AnalyticState):
            raise InvalidParameter("analytic-free evolution needs an analytic state")
        if not potential.is_zero:
            raise InvalidParameter("analytic-free evolution cannot include a potential")
        return Evolution(initial, method, t_end)
    if not isinstance(initial, GridState):
        raise InvalidParameter(f"{method} evolution needs a grid state")
    if not initial.normalized:
        raise InvalidState("evolutions start from a normalized grid state")
    if method == "spectral-free" and not potential.is_zero:
        raise InvalidParameter("spectral-free evolution cannot include a potential; use split-step")
    if dt is None:
        raise InvalidParameter(f"{method} needs dt")
    dt_frame = dt_frame if dt_frame is not None else 10 * dt
    per = int(round(dt_frame / dt))
    if per < 1 or abs(per * dt - dt_frame) > 1e-9 * dt_frame:
        raise InvalidParameter("dt_frame must be a positive integer multiple of dt")
    nframes = int(math.floor(T / dt_frame + 1e-9))
    frames = [initial]
    if guard:
        check_escape(initial)
    if store:
        cur = initial
        for j in range(1, nframes + 1):
            if method == "spectral-free":
                cur = free_step_spectral(initial, j * dt_frame)
            else:
                cur = split_step(cur, potential, dt, per)
                cur = GridState(cur.spec, cur.amplitudes, initial.t + j * dt_frame, cur.mass, normalized=False)
            if abs(cur.norm2() - 1) > 1e-9:
                raise ResolutionError(f"frame {j} norm defect {abs(cur.norm2() - 1):.2e}")
            cur = GridState(cur.spec, cur.amplitudes, cur.t, cur.mass, True)
            if guard:
                check_escape(cur)
            frames.append(cur)
        t_end = min(t_end, frames[-1].t) if method == "split-step" else t_end
    return Evolution(initial, method, t_end, dt, dt_frame, potential, frames)


def save_frames(e: Evolution, directory) -> Path:
    """Write frames as QFX1 checkpoints plus a manifest ``index time filename``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for j, f in enumerate(e.frames):
        name = f"frame_{j:05d}.qfx"
        write_checkpoint(f, directory / name)
        lines.append(f"{j} {f.t!r} {name}\n")
    manifest = directory / "frames.txt"
    manifest.write_text("".join(lines), encoding="utf-8")
    return manifest


def load_frames(manifest, dt=None, potential=None) -> Evolution:
    """Rebuild a split-step style frame store from a manifest written by :func:`save_frames`."""
    manifest = Path(manifest)
    frames = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        _, t, name = line.split()
        frames.append(read_checkpoint(manifest.parent / name))
    if not frames:
        raise InvalidState(f"{manifest}: no frames listed")
    dt_frame = frames[1].t - frames[0].t if len(frames) > 1 else 1.0
    return Evolution(frames[0], "split-step", frames[-1].t, dt or dt_frame, dt_frame, potential, frames)
