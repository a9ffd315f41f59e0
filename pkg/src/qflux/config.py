"""Run configuration: a small sectioned ``key = value`` format.

    # comment
    [state]
    kind = "gaussian"
    x0 = (0, 0, 0)
    sigma = 1.0

Values are numbers, quoted strings or parenthesized tuples of those.
Unknown sections and keys are errors; every error carries a line number.
"""
from __future__ import annotations

import ast
import math
import re
from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError

_SECTION = re.compile(r"^\[\s*([A-Za-z_][A-Za-z0-9_]*)\s*\]$")
_KEY = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*)$")
_NUMBER = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")


@dataclass
class StateSection:
    kind: str = "gaussian"  # gaussian | superposition | checkpoint
    x0: tuple = (0.0, 0.0, 0.0)
    p0: tuple = (0.0, 0.0, 0.0)
    sigma: float = 1.0
    mass: float = 1.0
    second_x0: tuple | None = None
    second_p0: tuple | None = None
    second_sigma: float | None = None
    amplitude: float = 1.0  # weight of the second packet
    phase: float = 0.0  # its relative phase, radians
    path: str | None = None


@dataclass
class EvolutionSection:
    method: str = "analytic-free"
    T: float = 10.0
    dt: float | None = None
    dt_frame: float | None = None
    n: int = 64
    L: float = 40.0
    potential: str = "zero"
    V0: float = 0.0
    a: float = 1.0
    center: tuple | None = None


@dataclass
class RegionSection:
    kind: str = "ball"  # ball | interval
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 5.0
    a: float = -1.0
    b: float = 1.0


@dataclass
class SurfaceSection:
    n_theta: int = 32
    n_phi: int = 64
    bands: int = 8
    axis: tuple = (0.0, 0.0, 1.0)


@dataclass
class EnsembleSection:
    N: int = 10000
    seed: int = 1
    horizon: float | None = None  # default: evolution T
    rtol: float = 1e-8
    atol: float = 1e-10
    block: int = 1024
    bins: int = 64
    trajectories: int = 10  # count for the trajectories command
    decimate: int = 1


@dataclass
class SolidAngleSection:
    axis: tuple = (1.0, 0.0, 0.0)
    half_angle_deg: float = 45.0


@dataclass
class FastSection:
    radii: tuple = (10.0, 20.0, 40.0)
    T: float = 200.0
    dt: float = 0.05


@dataclass
class OutputSection:
    directory: str = "out"
    times: int = 101  # sample times for flux series


@dataclass
class RunConfig:
    state: StateSection = field(default_factory=StateSection)
    evolution: EvolutionSection = field(default_factory=EvolutionSection)
    region: RegionSection = field(default_factory=RegionSection)
    surface: SurfaceSection = field(default_factory=SurfaceSection)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    solid_angle: SolidAngleSection = field(default_factory=SolidAngleSection)
    fast: FastSection = field(default_factory=FastSection)
    output: OutputSection = field(default_factory=OutputSection)

    @property
    def dim(self) -> int:
        return len(self.state.x0)


SECTIONS = {f.name: f.default_factory for f in fields(RunConfig)}


def _parse_scalar(tok: str, line: int):
    tok = tok.strip()
    if not tok:
        raise ConfigError("missing value", line)
    if tok[0] in "\"'":
        if len(tok) < 2 or tok[-1] != tok[0]:
            raise ConfigError(f"unterminated string {tok!r}", line)
        try:
            return ast.literal_eval(tok)
        except (ValueError, SyntaxError):
            raise ConfigError(f"bad string {tok!r}", line) from None
    if _NUMBER.match(tok):
        v = float(tok)
        if re.fullmatch(r"[+-]?\d+", tok):
            return int(tok)
        return v
    raise ConfigError(f"cannot parse value {tok!r} (expected number, quoted string or tuple)", line)


def _strip_comment(text: str) -> str:
    quote = None
    for i, ch in enumerate(text):
        if quote:
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch == "#":
            return text[:i]
    return text


def parse_value(text: str, line: int = None):
    text = text.strip()
    if text.startswith("("):
        if not text.endswith(")"):
            raise ConfigError("unterminated tuple", line)
        inner = text[1:-1].strip()
        if not inner:
            return ()
        parts = [p for p in inner.split(",")]
        if parts[-1].strip() == "":
            parts = parts[:-1]
        return tuple(_parse_scalar(p, line) for p in parts)
    return _parse_scalar(text, line)


def _coerce(value, default, name, line):
    """Match the type of the section default; ints promote to float."""
    if isinstance(default, bool):
        raise ConfigError(f"{name}: booleans are not supported", line)
    if isinstance(default, tuple) or (default is None and isinstance(value, tuple)):
        if not isinstance(value, tuple):
            value = (value,)
        if not all(isinstance(v, (int, float)) for v in value):
            raise ConfigError(f"{name}: expected a tuple of numbers", line)
        return tuple(float(v) for v in value)
    if isinstance(default, str) or (default is None and isinstance(value, str)):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a quoted string", line)
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer", line)
        return value
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    raise ConfigError(f"{name}: expected a number", line)


_STRING_KEYS = {("state", "path")}


def parse_config(text: str) -> RunConfig:
    """Parse and validate a run configuration; the first error wins."""
    cfg = RunConfig()
    lines_of = {}
    section = None
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        m = _SECTION.match(line)
        if m:
            section = m.group(1)
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]", lineno)
            continue
        m = _KEY.match(line)
        if not m:
            raise ConfigError(f"syntax error: {raw.strip()!r}", lineno)
        if section is None:
            raise ConfigError("key outside of a section", lineno)
        key, rhs = m.group(1), m.group(2)
        sec = getattr(cfg, section)
        names = {f.name for f in fields(sec)}
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in [{section}]", lineno)
        if (section, key) in seen:
            raise ConfigError(f"duplicate key {key!r} in [{section}]", lineno)
        seen.add((section, key))
        default = getattr(type(sec)(), key)
        if (section, key) in _STRING_KEYS:
            default = ""
        elif default is None:
            default = _none_default_type(section, key)
        value = _coerce(parse_value(rhs, lineno), default, key, lineno)
        setattr(cfg, section, replace(sec, **{key: value}))
        lines_of[(section, key)] = lineno
    _validate(cfg, lines_of)
    return cfg


def _none_default_type(section, key):
    if key in ("second_x0", "second_p0", "center"):
        return ()
    return 0.0


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def _validate(cfg: RunConfig, lines_of):
    def fail(section, key, msg):
        raise ConfigError(f"[{section}] {key}: constraint violated: {msg}", lines_of.get((section, key)))

    s = cfg.state
    if s.kind not in ("gaussian", "superposition", "checkpoint"):
        fail("state", "kind", 'kind in {"gaussian", "superposition", "checkpoint"}')
    if len(s.x0) not in (1, 3):
        fail("state", "x0", "x0 has 1 or 3 components")
    if len(s.p0) != len(s.x0):
        fail("state", "p0", "p0 has as many components as x0")
    if not s.sigma > 0:
        fail("state", "sigma", "sigma > 0")
    if not s.mass > 0:
        fail("state", "mass", "mass > 0")
    if s.kind == "superposition":
        if s.second_x0 is None or s.second_p0 is None:
            fail("state", "second_x0", "superposition needs second_x0 and second_p0")
        if len(s.second_x0) != len(s.x0) or len(s.second_p0) != len(s.x0):
            fail("state", "second_x0", "second packet has the dimension of the first")
        if s.second_sigma is not None and not s.second_sigma > 0:
            fail("state", "second_sigma", "second_sigma > 0")
    if s.kind == "checkpoint" and not s.path:
        fail("state", "path", "checkpoint state needs a path")

    e = cfg.evolution
    if e.method not in ("analytic-free", "spectral-free", "split-step"):
        fail("evolution", "method", 'method in {"analytic-free", "spectral-free", "split-step"}')
    if not e.T > 0:
        fail("evolution", "T", "T > 0")
    if e.potential not in ("zero", "gaussian-bump", "square"):
        fail("evolution", "potential", 'potential in {"zero", "gaussian-bump", "square"}')
    if e.potential != "zero" and e.method != "split-step":
        fail("evolution", "potential", "a potential needs method split-step")
    if e.method == "analytic-free" and s.kind == "checkpoint":
        fail("evolution", "method", "a checkpoint state needs a grid method")
    if e.method != "analytic-free":
        if e.dt is None or not e.dt > 0:
            fail("evolution", "dt", "grid methods need dt > 0")
        if e.n < 8 or e.n & (e.n - 1):
            fail("evolution", "n", "n is a power of two >= 8")
        if not e.L > 0:
            fail("evolution", "L", "L > 0")
        if e.dt_frame is not None:
            per = e.dt_frame / e.dt
            if per < 1 or abs(per - round(per)) > 1e-9 * per:
                fail("evolution", "dt_frame", "dt_frame is a positive integer multiple of dt")
    if not e.a > 0:
        fail("evolution", "a", "a > 0")
    if e.center is not None and len(e.center) != len(s.x0):
        fail("evolution", "center", "potential center has the state dimension")

    r = cfg.region
    if r.kind not in ("ball", "interval"):
        fail("region", "kind", 'kind in {"ball", "interval"}')
    if r.kind == "ball":
        if len(s.x0) != 3:
            fail("region", "kind", "a ball region needs a 3D state")
        if not r.radius > 0:
            fail("region", "radius", "radius > 0")
        if len(r.center) != 3:
            fail("region", "center", "ball center has 3 components")
    else:
        if len(s.x0) != 1:
            fail("region", "kind", "an interval region needs a 1D state")
        if not r.a < r.b:
            fail("region", "b", "a < b")

    f = cfg.surface
    for key in ("n_theta", "n_phi", "bands"):
        if getattr(f, key) < 1:
            fail("surface", key, f"{key} >= 1")
    if len(f.axis) != 3 or math.hypot(*f.axis) == 0:
        fail("surface", "axis", "axis is a nonzero 3-vector")

    n = cfg.ensemble
    if n.N < 1:
        fail("ensemble", "N", "N >= 1")
    if n.seed < 0:
        fail("ensemble", "seed", "seed >= 0")
    if n.horizon is not None and not n.horizon > 0:
        fail("ensemble", "horizon", "horizon > 0")
    if n.horizon is not None and n.horizon > e.T * (1 + 1e-12):
        fail("ensemble", "horizon", "horizon <= evolution T")
    if not (n.rtol > 0 and n.atol > 0):
        fail("ensemble", "rtol", "rtol > 0 and atol > 0")
    for key in ("block", "bins", "trajectories", "decimate"):
        if getattr(n, key) < 1:
            fail("ensemble", key, f"{key} >= 1")

    a = cfg.solid_angle
    if len(a.axis) != 3 or math.hypot(*a.axis) == 0:
        fail("solid_angle", "axis", "axis is a nonzero 3-vector")
    if not 0 < a.half_angle_deg <= 180:
        fail("solid_angle", "half_angle_deg", "0 < half_angle_deg <= 180")

    fa = cfg.fast
    if not fa.radii or any(not R > 0 for R in fa.radii):
        fail("fast", "radii", "radii > 0")
    if not (fa.T > 0 and fa.dt > 0):
        fail("fast", "T", "T > 0 and dt > 0")

    if cfg.output.times < 2:
        fail("output", "times", "times >= 2")


def _render(v) -> str:
    if isinstance(v, tuple):
        return "(" + ", ".join(_render(x) for x in v) + ")"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: RunConfig) -> str:
    """Resolved config in the input format; unset optional keys are omitted."""
    out = []
    for f in fields(RunConfig):
        sec = getattr(cfg, f.name)
        out.append(f"[{f.name}]")
        for sf in fields(sec):
            v = getattr(sec, sf.name)
            if v is not None:
                out.append(f"{sf.name} = {_render(v)}")
        out.append("")
    return "\n".join(out)
