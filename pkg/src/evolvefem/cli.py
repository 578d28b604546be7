"""Command line front end: single runs, convergence sweeps, and demos.

Configuration comes from an optional TOML file with a flat key set mirroring
:class:`RunConfig`; command line flags override file values.  Each driver
validates by building the laws-level problem configuration before any mesh
is allocated.  Sweep rows (one simulation per table row) may run in worker
threads, capped by the EVOLVEFEM_THREADS environment variable; output is
assembled sequentially, so repeated runs produce byte-identical files.

Exit codes: 0 success, 2 configuration error, 3 solver failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .bdf import MULTIPLIER_TABLE, bdf_delta, bdf_gamma, zero_stability_check
from .errors import ConfigError, MeshError, SolverError
from .laws import ProblemConfig, run, starting_values
from .mesh import (
    generate_implicit_mesh,
    generate_sphere_mesh,
    mesh_width,
    rounded_cube_level_set,
)
from .verify import (
    ConvergenceTable,
    ManufacturedSolution,
    coupled_manufactured,
    eoc,
    error_norms,
    exact_position_vector,
    forcing_dynamic,
    forcing_regularized,
    surface_area,
)
from .vtk_io import VTKError, series_path, write_vtk

#: four regularization strengths of the mean-curvature-flow demo
MCF_DEMO_ALPHAS = (0.1, 0.01, 0.001, 0.0)

#: base configuration of the rounded-cube demo; file and flags override it
MCF_DEMO_BASE = {
    "law": "regularized",
    "manufactured": False,
    "start": "bootstrap",
    "p": 4,
    "tau": 0.025,
    "end_time": 0.5,
    "level": 3,
    "observer_stride": 2,
    "output_dir": "mcf-demo",
}


@dataclass
class RunConfig:
    """Flat experiment description, the schema of the TOML config files."""

    law: str = "regularized"
    p: int = 2
    degree: int = 2
    tau: float = 0.05
    end_time: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    level: int = 2
    levels: tuple = ()
    taus: tuple = ()
    manufactured: bool = True
    r0: float = 1.0
    r1: float = 2.0
    start: str = "exact"
    output_dir: str = "out"
    observer_stride: int = 1

    def problem_config(self, alpha=None) -> ProblemConfig:
        """Validated stepper configuration (forcings attached separately)."""
        return ProblemConfig(
            law=self.law,
            p=self.p,
            tau=self.tau,
            end_time=self.end_time,
            alpha=self.alpha if alpha is None else alpha,
            beta=self.beta,
        )

    def solution(self) -> ManufacturedSolution:
        return ManufacturedSolution(r0=self.r0, r1=self.r1, alpha=self.alpha, beta=self.beta)


_FIELD_NAMES = tuple(f.name for f in fields(RunConfig))


def load_config_file(path) -> dict:
    with open(path, "rb") as fh:
        values = tomllib.load(fh)
    unknown = sorted(set(values) - set(_FIELD_NAMES))
    if unknown:
        raise ConfigError(f"{path}: unknown configuration keys {unknown}")
    return values


def build_run_config(args: argparse.Namespace, base: dict | None = None) -> RunConfig:
    """Merge base values, the optional config file, and flag overrides."""
    values = dict(base or {})
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    for name in _FIELD_NAMES:
        override = getattr(args, name, None)
        if override is not None:
            values[name] = override
    for name in ("levels", "taus"):
        if name in values:
            values[name] = tuple(values[name])
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.degree not in (1, 2):
        raise ConfigError(f"element degree must be 1 or 2, got {cfg.degree}")
    if cfg.level < 0 or any(level < 0 for level in cfg.levels):
        raise ConfigError("refinement levels must be nonnegative")
    cfg.problem_config()  # validate law/order/step data before allocating
    return cfg


def worker_count(jobs: int) -> int:
    raw = os.environ.get("EVOLVEFEM_THREADS")
    if raw is None:
        return max(1, min(jobs, os.cpu_count() or 1))
    try:
        cap = int(raw)
    except ValueError as exc:
        raise ConfigError(f"EVOLVEFEM_THREADS must be an integer, got {raw!r}") from exc
    if cap < 1:
        raise ConfigError(f"EVOLVEFEM_THREADS must be positive, got {cap}")
    return max(1, min(jobs, cap))


def _sweep(work, rows):
    """Run one simulation per row, in order-preserving worker threads."""
    workers = worker_count(len(rows))
    if workers == 1:
        return [work(row) for row in rows]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(work, rows))


def _forcings(cfg: RunConfig, ms):
    """Law-appropriate manufactured forcings, or no forcing at all."""
    if not cfg.manufactured:
        return {}
    if cfg.law == "regularized":
        return {"forcing_g": lambda pts, t: forcing_regularized(pts, t, ms)}
    if cfg.law == "dynamic":
        return {"forcing_g": lambda pts, t: forcing_dynamic(pts, t, ms)}
    _, f, g = coupled_manufactured(ms)
    return {"forcing_g": g, "forcing_f": f}


def _problem(cfg: RunConfig, ms, alpha=None) -> ProblemConfig:
    return replace(cfg.problem_config(alpha=alpha), **_forcings(cfg, ms))


# ------------------------------------------------------------------- run


class _FrameWriter:
    """Observer that emits one VTK file per sample and tracks areas."""

    def __init__(self, directory, mesh, prefix="surface"):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.mesh = mesh
        self.prefix = prefix
        self.files = []
        self.times = []
        self.areas = []

    def __call__(self, n, t, positions, velocity, u):
        path = series_path(self.directory, len(self.files), prefix=self.prefix)
        write_vtk(path, self.mesh, positions=positions, velocity=velocity, u=u,
                  title="t = %.17g" % t)
        self.files.append(path.name)
        self.times.append(t)
        self.areas.append(surface_area(self.mesh, positions))


def _write_summary(directory, payload) -> None:
    with open(Path(directory) / "summary.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_run(cfg: RunConfig) -> int:
    ms = cfg.solution() if cfg.manufactured else None
    problem = _problem(cfg, ms)
    mesh = generate_sphere_mesh(cfg.level, degree=cfg.degree)
    writer = _FrameWriter(cfg.output_dir, mesh)

    if problem.num_steps < problem.p - 1:
        warnings.warn(
            f"end time {cfg.end_time} is shorter than the {cfg.p}-step starting window; "
            "writing the starting phase only"
        )
        state = starting_values(problem, mesh, ms=ms, mode=cfg.start)
        for j in reversed(range(len(state.positions))):
            u = None if state.u_values is None else state.u_values[j]
            writer(state.n - j, (state.n - j) * cfg.tau,
                   state.positions[j], state.velocities[j], u)
        stats = {"num_steps": 0, "total_iterations": 0}
        final_time = state.time
    else:
        result = run(problem, mesh, ms=ms, observers=[writer],
                     observer_stride=cfg.observer_stride, start=cfg.start)
        stats = {"num_steps": result.num_steps,
                 "total_iterations": result.total_iterations}
        final_time = result.state.time

    summary = {
        "law": cfg.law,
        "p": cfg.p,
        "tau": cfg.tau,
        "final_time": final_time,
        "areas": writer.areas,
        "times": writer.times,
        "files": writer.files,
        **stats,
    }
    _write_summary(cfg.output_dir, summary)
    print(f"{cfg.law}: {stats['num_steps']} steps to t = {final_time:g}, "
          f"{len(writer.files)} frames in {cfg.output_dir}")
    return 0


# ------------------------------------------------------- convergence sweeps


def _position_errors(cfg: RunConfig, level: int, tau: float):
    """L2/H1 position error at the end time for one mesh level and step size."""
    ms = cfg.solution()
    problem = replace(_problem(cfg, ms), tau=tau)
    mesh = generate_sphere_mesh(level, degree=cfg.degree)
    result = run(problem, mesh, ms=ms, start=cfg.start)
    exact = exact_position_vector(mesh, result.state.time, ms)
    return error_norms(result.state.positions[0], exact, mesh)


def _emit_table(cfg: RunConfig, name: str, table: ConvergenceTable) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(table.to_csv())
    sys.stdout.write(f"# {name}\n{table.to_csv()}")
    return path


def cmd_converge_time(cfg: RunConfig) -> int:
    if not cfg.manufactured:
        raise ConfigError("convergence sweeps need the manufactured solution")
    taus = cfg.taus or tuple(0.1 * 0.5**i for i in range(5))
    if sorted(taus, reverse=True) != list(taus):
        raise ConfigError("time steps must be listed in decreasing order")
    levels = cfg.levels or (cfg.level,)
    for level in levels:
        errors = _sweep(lambda tau: _position_errors(cfg, level, tau), taus)
        table = eoc(taus, [e[0] for e in errors], [e[1] for e in errors])
        _emit_table(cfg, f"convergence_time_level{level}.csv", table)
    return 0


def cmd_converge_space(cfg: RunConfig) -> int:
    if not cfg.manufactured:
        raise ConfigError("convergence sweeps need the manufactured solution")
    levels = cfg.levels or (1, 2, 3, 4)
    if sorted(levels) != list(levels):
        raise ConfigError("mesh levels must be listed in increasing order")
    errors = _sweep(lambda level: _position_errors(cfg, level, cfg.tau), list(levels))
    widths = [mesh_width(generate_sphere_mesh(level, degree=cfg.degree)) for level in levels]
    table = eoc(widths, [e[0] for e in errors], [e[1] for e in errors])
    _emit_table(cfg, "convergence_space.csv", table)
    return 0


# ------------------------------------------------------------ coefficients


def cmd_coefficients(p: int) -> int:
    if not 1 <= p <= 7:
        raise ConfigError(f"BDF order must be in 1..7, got {p}")
    delta = ", ".join("%g" % d for d in bdf_delta(p))
    gamma = ", ".join("%g" % g for g in bdf_gamma(p))
    eta = MULTIPLIER_TABLE.get(p)
    print(f"BDF{p}  delta: {delta}")
    print(f"BDF{p}  gamma: {gamma}")
    print(f"BDF{p}  multiplier eta: " + ("%.4f" % eta if eta is not None else "none known"))
    stable = zero_stability_check(p)
    print(f"BDF{p}  zero-stable: {'yes' if stable else 'no, not zero-stable'}")
    return 0


# -------------------------------------------------------------------- demo


def cmd_mcf_demo(cfg: RunConfig) -> int:
    """Mean curvature flow of a rounded cube at decreasing regularization."""
    base = generate_sphere_mesh(cfg.level, degree=cfg.degree)
    mesh = generate_implicit_mesh(rounded_cube_level_set, base)
    out = Path(cfg.output_dir)
    summary = {}
    for alpha in MCF_DEMO_ALPHAS:
        problem = ProblemConfig(law="regularized", p=cfg.p, tau=cfg.tau,
                                end_time=cfg.end_time, alpha=alpha, beta=cfg.beta)
        writer = _FrameWriter(out / f"alpha-{alpha:g}", mesh)
        result = run(problem, mesh, observers=[writer],
                     observer_stride=cfg.observer_stride, start="bootstrap")
        summary[f"alpha-{alpha:g}"] = {
            "areas": writer.areas,
            "times": writer.times,
            "files": writer.files,
            "total_iterations": result.total_iterations,
        }
        print(f"alpha = {alpha:g}: area {writer.areas[0]:.6f} -> {writer.areas[-1]:.6f} "
              f"in {result.num_steps} steps")
    _write_summary(out, summary)
    return 0


# -------------------------------------------------------------- interface


def _add_config_flags(sub: argparse.ArgumentParser, *names) -> None:
    flags = {
        "law": dict(type=str, help="velocity law (regularized, dynamic, coupled)"),
        "p": dict(type=int, help="BDF order"),
        "degree": dict(type=int, help="element degree (1 or 2)"),
        "tau": dict(type=float, help="time step"),
        "end_time": dict(type=float, help="final time T"),
        "alpha": dict(type=float, help="elliptic regularization parameter"),
        "beta": dict(type=float, help="curvature term weight"),
        "level": dict(type=int, help="mesh refinement level"),
        "levels": dict(type=int, nargs="+", help="mesh levels of a sweep"),
        "taus": dict(type=float, nargs="+", help="time steps of a sweep"),
        "r0": dict(type=float, help="initial sphere radius"),
        "r1": dict(type=float, help="limit sphere radius"),
        "start": dict(type=str, help="starting values: exact or bootstrap"),
        "output_dir": dict(type=str, help="output directory"),
        "observer_stride": dict(type=int, help="emit every n-th frame"),
    }
    sub.add_argument("--config", type=str, help="TOML configuration file")
    for name in names:
        sub.add_argument("--" + name.replace("_", "-"), dest=name, **flags[name])
    group = sub.add_mutually_exclusive_group()
    group.add_argument("--manufactured", dest="manufactured", action="store_true",
                       default=None, help="use the expanding-sphere solution")
    group.add_argument("--free", dest="manufactured", action="store_false",
                       default=None, help="run without manufactured forcing")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evolvefem",
        description="Evolving-surface finite elements with BDF time stepping.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="integrate one configuration, write VTK frames")
    _add_config_flags(p_run, "law", "p", "degree", "tau", "end_time", "alpha", "beta",
                      "level", "r0", "r1", "start", "output_dir", "observer_stride")

    p_time = sub.add_parser("converge-time", help="error vs. time step tables")
    _add_config_flags(p_time, "law", "p", "degree", "end_time", "alpha", "beta",
                      "level", "levels", "taus", "r0", "r1", "start", "output_dir")

    p_space = sub.add_parser("converge-space", help="error vs. mesh width table")
    _add_config_flags(p_space, "law", "p", "degree", "tau", "end_time", "alpha",
                      "beta", "levels", "r0", "r1", "start", "output_dir")

    p_coeff = sub.add_parser("coefficients", help="print BDF coefficient tables")
    p_coeff.add_argument("--p", type=int, required=True, help="BDF order (1..7)")

    p_demo = sub.add_parser("mcf-demo", help="rounded-cube mean curvature flow")
    _add_config_flags(p_demo, "p", "degree", "tau", "end_time", "beta", "level",
                      "output_dir", "observer_stride")
    return parser


def _requested_law(args: argparse.Namespace):
    if getattr(args, "law", None) is not None:
        return args.law
    if getattr(args, "config", None):
        return load_config_file(args.config).get("law")
    return None


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        if args.command == "coefficients":
            return cmd_coefficients(args.p)
        if args.command == "mcf-demo":
            return cmd_mcf_demo(build_run_config(args, base=MCF_DEMO_BASE))
        if args.command == "run" and _requested_law(args) == "mcf-demo":
            args.law = None  # preset alias: delegate to the demo driver
            return cmd_mcf_demo(build_run_config(args, base=MCF_DEMO_BASE))
        cfg = build_run_config(args)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "converge-time":
            return cmd_converge_time(cfg)
        return cmd_converge_space(cfg)
    except (ConfigError, MeshError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3
    except (OSError, VTKError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
