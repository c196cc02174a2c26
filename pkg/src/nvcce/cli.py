"""`simulate` command line: run, validate and oracle-check JSON run configs.

Exit codes: 0 success, 2 invalid configuration, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from functools import partial
from pathlib import Path

import numpy as np
from pydantic import ValidationError
from threadpoolctl import threadpool_limits

from . import __version__
from .bath import RNG_ALGORITHM, SurfaceConfig, generate_bulk_bath
from .cce import CceConfig, CoherenceProblem, cluster_system, exact_coherence, gcce_coherence, resolve_core
from .config import OracleSection, RunConfig, format_validation_error, load_config, read_config_json, resolve_config
from .errors import ConfigurationError, NumericalError
from .fields import (
    asymmetry_metric,
    depth_scan,
    find_clock_transitions,
    level_diagram,
    odmr_spectrum,
    sweep_t2star,
)
from .io import write_csv, write_curve, write_json, write_level_diagram, write_odmr, write_sweep
from .spin_core import GYRO_ELECTRON

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

log = logging.getLogger("nvcce")


def _limit_blas():
    threadpool_limits(limits=1)


@contextmanager
def work_map(threads: int):
    """``map`` over independent work items; BLAS stays single-threaded so results never depend on ``threads``."""
    with threadpool_limits(limits=1):
        if threads <= 1:
            yield map
            return
        with ProcessPoolExecutor(max_workers=threads, initializer=_limit_blas) as pool:
            yield partial(pool.map, chunksize=1)


def config_digest(cfg: RunConfig) -> str:
    blob = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _common_meta(cfg: RunConfig) -> dict:
    return {
        "scenario": cfg.scenario,
        "seed": cfg.seed,
        "rng": RNG_ALGORITHM,
        "config_sha256": config_digest(cfg),
        "package_version": __version__,
        "units": {"field": "G", "frequency": "MHz", "time": "us", "length": "angstrom"},
    }


def _bath_meta(problem: CoherenceProblem) -> dict:
    return {"n_bath_spins": len(problem.bath), "core_spins": list(resolve_core(problem.bath, problem.cce))}


# -- scenarios ------------------------------------------------------------


def run_fid_sweep(cfg: RunConfig, out: Path, map_fn, keep_going: bool) -> list[Path]:
    problem = cfg.problem()
    section = cfg.sweep
    phis = section.phi_values if section.phi_values is not None else [cfg.geometry.phi]
    files = []
    for phi in phis:
        geometry = cfg.field_geometry(phi)
        sweep = sweep_t2star(
            problem,
            geometry,
            section.grid(),
            cfg.pulse_protocol(),
            cfg.window(),
            include_clock_points=section.include_clock_points,
            map_fn=map_fn,
            clock_scan_points=section.clock_scan_points,
            keep_going=keep_going,
        )
        name = "sweep.csv" if section.phi_values is None else f"sweep_phi{phi:g}.csv"
        extra = {**_common_meta(cfg), **_bath_meta(problem), "asymmetry": asymmetry_metric(sweep).__dict__}
        files.append(write_sweep(out / name, sweep, extra))
        log.info("%s: %d points, %d unresolved, %d clock transitions", name, len(sweep.b0), sweep.metadata["n_unresolved"], len(sweep.clock_transitions))
    return files


def _depth_fields(cfg: RunConfig):
    out = []
    for f in cfg.depth_scan.fields:
        if f.clock:
            n = cfg.nitrogen()
            if n is None:
                raise ConfigurationError(f"depth_scan.fields[{f.label}]: clock=true needs bath.nitrogen")
            out.append((f.label, (0.0, 0.0, n.hyperfine.azz / (2 * GYRO_ELECTRON))))
        else:
            out.append((f.label, tuple(f.vector)))
    return out


def run_echo_depth_scan(cfg: RunConfig, out: Path, map_fn, keep_going: bool) -> list[Path]:
    sec = cfg.depth_scan
    n = cfg.nitrogen()
    core = ([n] if n is not None else []) + cfg.fixed_spins()
    bulk = []
    if cfg.bath.bulk:
        bulk = generate_bulk_bath(cfg.lattice())
    surfaces = [SurfaceConfig(t, d, sec.mix_ratio, sec.lateral_extent) for d in sec.depths for t in sec.terminations]
    rows = depth_scan(
        cfg.central_model(),
        core,
        surfaces,
        cfg.lattice(),
        _depth_fields(cfg),
        cfg.cce_config(),
        cfg.window(),
        bulk=bulk,
        map_fn=map_fn,
    )
    header = (
        "depth_angstrom", "termination", "field_label", "b_x_gauss", "b_y_gauss", "b_z_gauss",
        "t2_us", "t2_mean_us", "t2_std_us", "n_resolved", "n_branches", "n_spins",
    )  # fmt: skip
    path = write_csv(
        out / "depth_scan.csv",
        header,
        ((r.depth, r.termination, r.field_label, *r.field, r.t2_us, r.t2_mean_us, r.t2_std_us, r.n_resolved, r.n_branches, r.n_spins) for r in rows),
    )
    meta = {**_common_meta(cfg), "protocol": "hahn_echo", "window": cfg.decay.model_dump(), "cce": cfg.cce.model_dump()}
    write_json(path.with_suffix(".json"), meta)
    return [path]


def _diagram(cfg: RunConfig):
    sec = cfg.level
    grid = np.linspace(sec.b0_min, sec.b0_max, sec.n_points)
    problem = cfg.problem()
    return problem, level_diagram(problem, cfg.field_geometry(), grid, sec.spin_ids)


def run_level_diagram(cfg: RunConfig, out: Path, map_fn, keep_going: bool) -> list[Path]:
    problem, d = _diagram(cfg)
    cts = find_clock_transitions(d)
    extra = {**_common_meta(cfg), **_bath_meta(problem), "clock_transitions": [c.to_dict() for c in cts]}
    return [write_level_diagram(out / "levels.csv", d, extra)]


def run_clock_find(cfg: RunConfig, out: Path, map_fn, keep_going: bool) -> list[Path]:
    problem, d = _diagram(cfg)
    cts = find_clock_transitions(d)
    header = ("b0_gauss", "b_axial_gauss", "level_lo", "level_hi", "gap_mhz", "dfdb_mhz_per_gauss", "ms0_partner")
    rows = ((c.b0, c.b_axial, c.pair[0], c.pair[1], c.gap_mhz, c.dfdb_mhz_per_gauss, c.partner) for c in cts)
    path = write_csv(out / "clock_transitions.csv", header, rows)
    write_json(path.with_suffix(".json"), {**_common_meta(cfg), **_bath_meta(problem), "geometry": cfg.geometry.model_dump(), "splits": d.splits})
    for c in cts:
        log.info("clock transition at b0 = %.6g G (axial %.6g G), gap %.6g MHz", c.b0, c.b_axial, c.gap_mhz)
    return [path]


def run_odmr(cfg: RunConfig, out: Path, map_fn, keep_going: bool) -> list[Path]:
    sec = cfg.odmr
    problem = cfg.problem(cfg.field_geometry().vector(sec.b0))
    ids = resolve_core(problem.bath, problem.cce) if sec.spin_ids is None else tuple(sec.spin_ids)
    system = cluster_system(problem, ids)
    freqs = None
    if sec.f_min is not None or sec.f_max is not None:
        if sec.f_min is None or sec.f_max is None or not sec.f_max > sec.f_min:
            raise ConfigurationError("odmr: give both f_min < f_max or neither")
        freqs = np.linspace(sec.f_min, sec.f_max, sec.n_points)
    spectrum = odmr_spectrum(system, sec.linewidth, freqs, sec.polarization)
    return [write_odmr(out / "odmr.csv", spectrum, {**_common_meta(cfg), "spin_ids": list(ids), "b0": sec.b0})]


def oracle_report(cfg: RunConfig):
    """Max |L_gcce - L_exact| for gCCE-1 and (when r_dip is set) gCCE-2, plus the curves."""
    sec = cfg.oracle or OracleSection()
    problem = cfg.problem(cfg.field_geometry().vector(sec.b0))
    times = np.linspace(0.0, sec.t_max, sec.n_points)
    protocol = cfg.pulse_protocol()
    exact = exact_coherence(problem, protocol, times)
    curves = {"exact": exact}
    rows = []
    orders = [1] + ([2] if cfg.cce.r_dip is not None else [])
    for order in orders:
        c = CceConfig(**{**problem.cce.__dict__, "order": order})
        g = gcce_coherence(CoherenceProblem(problem.central, problem.bath, problem.field, c), protocol, times)
        curves[f"gcce{order}"] = g
        rows.append((order, float(np.abs(g.values - exact.values).max())))
    return problem, curves, rows


def run_oracle_check(cfg: RunConfig, out: Path, map_fn, keep_going: bool) -> list[Path]:
    problem, curves, rows = oracle_report(cfg)
    files = [write_curve(out / f"coherence_{k}.csv", c, _common_meta(cfg)) for k, c in curves.items()]
    path = write_csv(out / "oracle_summary.csv", ("order", "max_abs_deviation"), rows)
    write_json(path.with_suffix(".json"), {**_common_meta(cfg), **_bath_meta(problem)})
    for order, dev in rows:
        log.info("gCCE-%d max |L - L_exact| = %.3e", order, dev)
    return files + [path]


SCENARIOS = {
    "fid_sweep": run_fid_sweep,
    "echo_depth_scan": run_echo_depth_scan,
    "level_diagram": run_level_diagram,
    "clock_find": run_clock_find,
    "odmr": run_odmr,
    "oracle_check": run_oracle_check,
}


# -- plumbing ---------------------------------------------------------------


def _load(path) -> RunConfig:
    cfg = load_config(path)
    return resolve_config(cfg, Path(path).resolve().parent)


def _config_errors(path) -> list[str]:
    try:
        cfg = _load(path)
        # build every domain object once so physics-level invariants are checked too
        cfg.central_model(), cfg.cce_config(), cfg.window(), cfg.pulse_protocol(), cfg.field_geometry()
        if cfg.scenario != "echo_depth_scan":
            cfg.build_bath()
        else:
            _depth_fields(cfg)
    except ValidationError as exc:
        return format_validation_error(exc)
    except ConfigurationError as exc:
        return [str(exc)]
    return []


@contextmanager
def _run_log(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    pkg = logging.getLogger("nvcce")
    old = pkg.level
    pkg.setLevel(logging.INFO)
    pkg.addHandler(handler)
    try:
        yield
    finally:
        pkg.removeHandler(handler)
        pkg.setLevel(old)
        handler.close()


def cmd_run(args) -> int:
    try:
        read_config_json(args.config)
        cfg = _load(args.config)
    except ValidationError as exc:
        for line in format_validation_error(exc):
            print(f"config error: {line}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out if args.out is not None else cfg.output.dir)
    cfg = cfg.model_copy(update={"output": cfg.output.model_copy(update={"dir": str(out)})})
    threads = args.threads or os.cpu_count() or 1
    with _run_log(out):
        log.info("simulate %s, scenario %s, seed %d", __version__, cfg.scenario, cfg.seed)
        write_json(out / "resolved_config.json", cfg.model_dump(mode="json"))
        try:
            with work_map(threads) as map_fn:
                files = SCENARIOS[cfg.scenario](cfg, out, map_fn, args.keep_going)
        except ConfigurationError as exc:
            log.error("configuration error: %s", exc)
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
            log.error("numerical failure: %s", exc)
            print(f"numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERICAL
        for f in files:
            log.info("wrote %s", f.name)
    for f in files:
        print(f)
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        read_config_json(args.config)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    problems = _config_errors(args.config)
    for line in problems:
        print(line)
    if not problems:
        print(f"{args.config}: ok")
    return EXIT_OK if not problems else EXIT_CONFIG


def cmd_oracle_check(args) -> int:
    try:
        cfg = _load(args.config)
    except ValidationError as exc:
        for line in format_validation_error(exc):
            print(f"config error: {line}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with threadpool_limits(limits=1):
            _, _, rows = oracle_report(cfg)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    for order, dev in rows:
        print(f"gCCE-{order}: max |L - L_exact| = {dev:.3e}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="simulate", description="NV central-spin coherence simulator")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a config and write CSV results")
    r.add_argument("config")
    r.add_argument("--threads", type=int, default=None, help="worker processes (default: all cores)")
    r.add_argument("--keep-going", action="store_true", help="record failed sweep points instead of aborting")
    r.add_argument("--out", default=None, help="output directory (overrides output.dir)")
    r.set_defaults(func=cmd_run)
    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("config")
    v.set_defaults(func=cmd_validate)
    o = sub.add_parser("oracle-check", help="compare gCCE against exact propagation")
    o.add_argument("config")
    o.set_defaults(func=cmd_oracle_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", None) is not None and args.threads < 1:
        print("--threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    console = logging.StreamHandler()
    console.setLevel(logging.WARNING)
    console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(console)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
