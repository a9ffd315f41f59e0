"""Command-line entry point: ``qflux <command> --config run.cfg --out DIR``.

Every run writes its outputs, the resolved config and ``manifest.txt``
(one ``path sha256 bytes`` line per file, timings as ``#`` comments).
Failures write ``error.json`` and exit nonzero.
"""
from __future__ import annotations

import argparse
import cmath
import hashlib
import json
import logging
import math
import sys
import time
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, bohm
from .compare import BinnedDensity, coverage_report, fmt, group_edges, write_report
from .config import RunConfig, dump_config, load_config
from .errors import ConfigError, QFluxError
from .evolve import Potential, evolve, save_frames
from .flux import (
    Ball,
    Interval,
    Side,
    binned_flux,
    cap,
    check_cpc,
    default_groups,
    flux_series,
    region_mass,
    region_mesh,
    truncated_flux_1d,
    verify_fast,
)
from .state import GaussianState, GaussianSuperposition, GridSpec, discretize, read_checkpoint, sample_positions

log = logging.getLogger("qflux")

COMMANDS = ("evolve", "flux", "exit-stats", "cpc-check", "verify-fast", "sample", "trajectories")


# --------------------------------------------------------------------------
# building blocks from a config


def build_state(cfg: RunConfig):
    s = cfg.state
    if s.kind == "checkpoint":
        return read_checkpoint(s.path)
    g = GaussianState(s.x0, s.p0, s.sigma, s.mass)
    if s.kind == "gaussian":
        analytic = g
    else:
        g2 = GaussianState(s.second_x0, s.second_p0, s.second_sigma or s.sigma, s.mass)
        analytic = GaussianSuperposition((g, g2), (1.0, s.amplitude * cmath.exp(1j * s.phase)))
    if cfg.evolution.method == "analytic-free":
        return analytic
    e = cfg.evolution
    return discretize(analytic, GridSpec((e.n,) * cfg.dim, (e.L,) * cfg.dim))


def build_potential(cfg: RunConfig) -> Potential:
    e = cfg.evolution
    if e.potential == "zero":
        return Potential()
    center = e.center if e.center is not None else (0.0,) * cfg.dim
    return Potential(e.potential, e.V0, e.a, center)


def build_evolution(cfg: RunConfig, state, T=None):
    e = cfg.evolution
    return evolve(state, e.method, T or e.T, dt=e.dt, dt_frame=e.dt_frame, potential=build_potential(cfg))


def build_region(cfg: RunConfig):
    r = cfg.region
    return Ball(r.center, r.radius) if r.kind == "ball" else Interval(r.a, r.b)


def build_solid_angle(cfg: RunConfig):
    a = cfg.solid_angle
    if cfg.dim == 1:
        return Side("right" if a.axis[0] >= 0 else "left")
    return cap(a.axis, math.radians(a.half_angle_deg))


def build_tolerances(cfg: RunConfig) -> bohm.Tolerances:
    return bohm.Tolerances(rtol=cfg.ensemble.rtol, atol=cfg.ensemble.atol)


def _horizon(cfg: RunConfig) -> float:
    return cfg.ensemble.horizon or cfg.evolution.T


# --------------------------------------------------------------------------
# run bookkeeping


class Run:
    def __init__(self, out: Path, command: str, cfg: RunConfig):
        self.out = out
        self.command = command
        self.cfg = cfg
        self.files = []
        self.timings = []
        self.notes = []
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(p)
        return p

    @contextmanager
    def timed(self, label):
        t0 = time.perf_counter()
        yield
        self.timings.append((label, time.perf_counter() - t0))

    def write_manifest(self):
        lines = [f"# qflux {__version__}", f"# command {self.command}"]
        lines += [f"# note {n}" for n in self.notes]
        lines += [f"# timing {label} {sec:.3f}" for label, sec in self.timings]
        for p in sorted(set(self.files)):
            data = p.read_bytes()
            lines.append(f"{p.relative_to(self.out).as_posix()} {hashlib.sha256(data).hexdigest()} {len(data)}")
        (self.out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_rows(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(v if isinstance(v, str) else (str(v) if isinstance(v, (int, np.integer)) else fmt(v)) for v in row) + "\n")


# --------------------------------------------------------------------------
# commands


def cmd_evolve(run: Run, args):
    cfg = run.cfg
    with run.timed("evolve"):
        e = build_evolution(cfg, build_state(cfg))
    G = build_region(cfg)
    times = np.linspace(e.t0, e.t_end, cfg.output.times) if e.is_analytic else e.frame_times()
    rows = []
    with run.timed("masses"):
        for t in times:
            s = e.state_at(t)
            norm = s.norm2()
            rows.append((t, norm, region_mass(s, G)))
    _write_rows(run.path("evolve.csv"), "t,norm,region_mass", rows)
    if not e.is_analytic:
        with run.timed("frames"):
            save_frames(e, run.out / "frames")
        for p in sorted((run.out / "frames").iterdir()):
            run.files.append(p)


def cmd_flux(run: Run, args):
    cfg = run.cfg
    e = build_evolution(cfg, build_state(cfg))
    G = build_region(cfg)
    mesh = region_mesh(G, cfg.surface.n_theta, cfg.surface.n_phi)
    times = np.linspace(e.t0, e.t_end, cfg.output.times) if e.is_analytic else e.frame_times()
    with run.timed("flux"):
        fs = flux_series(e, mesh, times)
    rows = ((t, p, fs.per_patch[i, p], fs.totals[i], fs.cumulative[i]) for i, t in enumerate(fs.times) for p in range(mesh.size))
    _write_rows(run.path("flux.csv"), "t,patch_id,flux,total,cumulative", rows)


def _edges(cfg, t0):
    return t0 + np.linspace(0.0, _horizon(cfg), cfg.ensemble.bins + 1)


def _flux_prediction(cfg, e, G, groups, edges):
    """Per (group, bin) first-exit probability predicted from the current."""
    if isinstance(G, Interval):
        tf = truncated_flux_1d(e, G, edges[-1])
        return tf.binned(edges), "truncated current"
    return binned_flux(e, groups, edges), "current"


def _joint_rows(groups_n, edges, p, se=None):
    for g in range(groups_n):
        for b in range(len(edges) - 1):
            row = [g, edges[b], edges[b + 1], p[g, b]]
            if se is not None:
                row.append(se[g, b])
            yield row


def cmd_exit_stats(run: Run, args):
    cfg = run.cfg
    state = build_state(cfg)
    e = build_evolution(cfg, state)
    G = build_region(cfg)
    groups = default_groups(G, cfg.surface.bands)
    edges = _edges(cfg, e.t0)
    want_flux = args.method in ("flux", "both")
    want_bohm = args.method in ("bohm", "both")
    pred = None
    if want_flux:
        with run.timed("cpc"):
            rep = check_cpc(e, G, np.linspace(e.t0, edges[-1], 201), n_theta=cfg.surface.n_theta, n_phi=cfg.surface.n_phi)
        run.notes.append(f"cpc {'holds' if rep.holds else 'violated'}")
        with run.timed("flux"):
            pred, label = _flux_prediction(cfg, e, G, groups, edges)
        run.notes.append(f"prediction {label}")
        _write_rows(run.path("exit_flux.csv"), "group,bin_lo,bin_hi,probability", _joint_rows(groups.size, edges, pred))
    if want_bohm:
        with run.timed("ensemble"):
            r = bohm.run_ensemble(state, e, G, cfg.ensemble.N, cfg.ensemble.seed, _horizon(cfg), build_tolerances(cfg), threads=args.threads, block=cfg.ensemble.block)
        st = bohm.exit_statistics(r, edges, groups)
        run.notes.append(f"exited {st.exited_fraction!r} failed {r.failed}")
        bohm.write_exits(run.path("exits.csv"), r)
        bohm.write_crossings(run.path("crossings.csv"), r.cross_traj, r.cross_time, r.cross_sign, r.cross_patch)
        _write_rows(run.path("exit_hist.csv"), "group,bin_lo,bin_hi,probability,stderr", _joint_rows(groups.size, edges, st.joint, st.joint_se))
    if want_flux and want_bohm:
        emp_t = BinnedDensity(edges, st.time_marginal, st.time_se)
        pre_t = BinnedDensity(edges, np.clip(pred.sum(axis=0), 0, None))
        write_report(run.path("report_time.csv"), emp_t, pre_t)
        je = group_edges(pred.size)
        emp_j = BinnedDensity(je, st.joint.ravel(), st.joint_se.ravel())
        pre_j = BinnedDensity(je, pred.ravel(), signed=True)
        write_report(run.path("report_joint.csv"), emp_j, pre_j)
        cov = coverage_report(emp_j, pre_j, 3.0)
        run.notes.append(f"coverage {cov.fraction!r}")


def cmd_cpc_check(run: Run, args):
    cfg = run.cfg
    e = build_evolution(cfg, build_state(cfg))
    G = build_region(cfg)
    times = np.linspace(e.t0, e.t_end, cfg.output.times) if e.is_analytic else e.frame_times()
    with run.timed("cpc"):
        rep = check_cpc(e, G, times, n_theta=cfg.surface.n_theta, n_phi=cfg.surface.n_phi)
    _write_rows(run.path("cpc.csv"), "t,patch_id,value", rep.violations)
    _write_rows(run.path("cpc_summary.csv"), "holds,violations,max_flux_density", [(str(int(rep.holds)), len(rep.violations), rep.max_flux_density)])


def cmd_verify_fast(run: Run, args):
    cfg = run.cfg
    radii = tuple(float(v) for v in args.radii.split(",")) if args.radii else cfg.fast.radii
    state = build_state(cfg)
    V = build_potential(cfg)
    with run.timed("fast"):
        rows = verify_fast(state, build_solid_angle(cfg), radii, cfg.fast.T, V=None if V.is_zero else V, dt=cfg.fast.dt if cfg.evolution.dt is None else cfg.evolution.dt, n_theta=cfg.surface.n_theta, n_phi=cfg.surface.n_phi)
    _write_rows(run.path("fast.csv"), "R,lhs,rhs,abs_err,remainder", [(r.R, r.lhs, r.rhs, r.abs_err, r.remainder) for r in rows])


def cmd_sample(run: Run, args):
    cfg = run.cfg
    x = sample_positions(build_state(cfg), cfg.ensemble.N, cfg.ensemble.seed)
    names = "x,y,z"[: 2 * x.shape[1] - 1]
    _write_rows(run.path("samples.csv"), "id," + names, ([i, *row] for i, row in enumerate(x)))


def cmd_trajectories(run: Run, args):
    cfg = run.cfg
    state = build_state(cfg)
    e = build_evolution(cfg, state)
    G = build_region(cfg)
    x0 = sample_positions(state, cfg.ensemble.trajectories, cfg.ensemble.seed)
    tol = build_tolerances(cfg)
    with run.timed("trajectories"):
        trs = [bohm.integrate_trajectory(x, e, _horizon(cfg), tol, G) for x in x0]
    bohm.write_trajectories(run.path("trajectories.csv"), trs, cfg.ensemble.decimate)
    traj = np.array([i for i, tr in enumerate(trs) for _ in tr.crossings], dtype=int)
    cr = [c for tr in trs for c in tr.crossings]
    bohm.write_crossings(
        run.path("crossings.csv"),
        traj,
        np.array([c.time for c in cr]),
        np.array([c.sign for c in cr], dtype=int),
        np.array([c.patch for c in cr], dtype=int),
    )


HANDLERS = {
    "evolve": cmd_evolve,
    "flux": cmd_flux,
    "exit-stats": cmd_exit_stats,
    "cpc-check": cmd_cpc_check,
    "verify-fast": cmd_verify_fast,
    "sample": cmd_sample,
    "trajectories": cmd_trajectories,
}


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="run configuration file")
    common.add_argument("--out", help="output directory (default: [output] directory)")
    common.add_argument("--seed", type=int, help="override [ensemble] seed")
    common.add_argument("--threads", type=int, default=1, help="worker threads; never changes results")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="qflux", description="Probability current, exit statistics and Bohmian ensembles.")
    p.add_argument("--version", action="version", version=f"qflux {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "exit-stats":
            sp.add_argument("--method", choices=("flux", "bohm", "both"), default="both")
        if name == "verify-fast":
            sp.add_argument("--radii", help="comma-separated radii, e.g. 10,20,40")
    return p


def _error_record(exc: Exception, command: str) -> dict:
    kind = getattr(exc, "kind", type(exc).__name__)
    module = type(exc).__module__
    tb = exc.__traceback__
    while tb is not None and tb.tb_next is not None:
        tb = tb.tb_next
    where = tb.tb_frame.f_code if tb is not None else None
    rec = {"error": kind, "message": str(exc), "command": command}
    if where is not None:
        rec["module"] = Path(where.co_filename).stem
        rec["operation"] = where.co_name
    else:
        rec["module"] = module
    if isinstance(exc, ConfigError):
        rec["module"], rec["operation"] = "config", "parse_config"
        if exc.line is not None:
            rec["line"] = exc.line
    return rec


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out) if args.out else None
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be >= 0")
            cfg = replace(cfg, ensemble=replace(cfg.ensemble, seed=args.seed))
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        out = Path(args.out or cfg.output.directory)
        run = Run(out, args.command, cfg)
        run.path("config.resolved").write_text(dump_config(cfg), encoding="utf-8")
        with run.timed("total"):
            HANDLERS[args.command](run, args)
        run.write_manifest()
        return 0
    except (QFluxError, OSError) as exc:
        rec = _error_record(exc, args.command)
        text = json.dumps(rec, sort_keys=True)
        print(text, file=sys.stderr)
        if out is not None:
            try:
                out.mkdir(parents=True, exist_ok=True)
                (out / "error.json").write_text(text + "\n", encoding="utf-8")
            except OSError:
                pass
        return 2 if isinstance(exc, ConfigError) else 1


if __name__ == "__main__":
    sys.exit(main())
