"""Command-line entry point: ``wgdelay {modes,smatrix,delay,sojourn,verify}``.

Every command reads a scenario file and writes CSV tables plus one JSON
summary into the output directory, chosen in this order: ``--output``,
the ``WGDELAY_OUTPUT_DIR`` environment variable, ``output.directory`` in the
scenario.  Files are written to a temporary name and renamed into place.

Exit status: 0 on success, 1 when ``verify`` finds a failing check, 2 for
an invalid scenario, 3 for any other numerical error.  Errors are printed
to stderr as one JSON object and also stored as ``error.json``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__, checks
from .errors import ConfigError, WaveguideError
from .scattering import ew_delay, sweep_smatrix
from .scenario import load_scenario
from .spectral import commutator_expectation, ew_expectation, forward_transform, scatter_packet
from .timedomain import tau_free, time_delay
from .waveguide import open_channels, threshold_intervals

ENV_OUTPUT = "WGDELAY_OUTPUT_DIR"

log = logging.getLogger("wgdelay")


# ---------------------------------------------------------------------------
# output helpers


def atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_export(path: Path, writer):
    """Run ``writer(tmp_path)`` and rename the result onto ``path``."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _num(v):
    if isinstance(v, (np.floating, float)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, np.ndarray):
        return [_num(x) for x in v.tolist()]
    if isinstance(v, dict):
        return {str(k): _num(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_num(x) for x in v]
    if isinstance(v, complex):
        return {"re": v.real, "im": v.imag}
    return v


def write_json(path: Path, obj):
    atomic_write(path, json.dumps(_num(obj), indent=2, sort_keys=True) + "\n")


def write_table(path: Path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    atomic_write(path, buf.getvalue())


def matrix_rows(energies, matrices):
    """(lambda, row, col, re, im) with 1-based fiber indices."""
    for e, m in zip(energies, matrices):
        d = m.shape[0]
        for i in range(d):
            for j in range(d):
                yield e, i + 1, j + 1, m[i, j].real, m[i, j].imag


def output_dir(args, scn) -> Path:
    if args.output:
        return Path(args.output)
    if os.environ.get(ENV_OUTPUT):
        return Path(os.environ[ENV_OUTPUT])
    return scn.output_directory


def _summary(scn, command, **extra):
    out = {"command": command, "scenario": scn.name, "config_hash": scn.digest, "version": __version__}
    out.update(extra)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_modes(args, scn, out: Path):
    basis = scn.basis
    coupling = scn.coupling()
    atomic_export(out / "coupling.csv", coupling.write_csv)
    intervals = [{"lambda_min": lo, "lambda_max": None if np.isinf(hi) else hi, "open_channels": n}
                 for lo, hi, n in threshold_intervals(basis)]
    lo, hi = scn.packet().energy_support()
    packet_open = [c + 1 for c in open_channels(0.5 * (lo + hi), basis, scn.threshold_window).channels]
    summary = _summary(scn, "modes", width=basis.width, thresholds=basis.thresholds, intervals=intervals,
                       threshold_window=scn.threshold_window, packet_energy_window=[lo, hi],
                       packet_open_channels=packet_open, coupling_peak=coupling.peak,
                       coupling_decay=coupling.check_decay())
    write_json(out / "modes.json", summary)
    for i, nu in enumerate(basis.thresholds):
        print(f"nu_{i + 1} = {nu:.12g}")
    return 0


def _run_sweep(args, scn):
    energies = scn.sweep_energies(args.lambda_min, args.lambda_max, args.points)
    return sweep_smatrix(scn.coupling(), scn.basis, energies, scn.solver_options, args.threads)


def cmd_smatrix(args, scn, out: Path):
    sweep = _run_sweep(args, scn)
    delay = ew_delay(sweep, scn.stencil_order)
    write_table(out / "smatrix.csv", ["lambda", "row", "col", "re", "im"],
                (r for seg in sweep.segments for r in matrix_rows(seg.energies, seg.matrices)))
    write_table(out / "tau_ew.csv", ["lambda", "row", "col", "re", "im"],
                (r for seg in delay.segments for r in matrix_rows(seg.energies, seg.tau)))
    write_table(out / "residuals.csv", ["lambda", "open_channels", "unitarity", "reciprocity", "condition",
                                        "hermiticity"],
                ((e, len(seg.channels), u, r, c, h) for seg, dseg in zip(sweep.segments, delay.segments)
                 for e, u, r, c, h in zip(seg.energies, seg.unitarity, seg.reciprocity, seg.condition,
                                          dseg.hermiticity)))
    res = sweep.max_residuals()
    tol = scn.tolerances
    summary = _summary(scn, "smatrix", points=len(sweep), residuals=res, hermiticity_max=delay.max_hermiticity,
                       stencil_order=delay.order,
                       segments=[{"lambda_min": s.energies[0], "lambda_max": s.energies[-1],
                                  "open_channels": [c + 1 for c in s.channels]} for s in sweep.segments],
                       ok=res["unitarity_max"] <= tol["unitarity"] and res["reciprocity_max"] <= tol["reciprocity"])
    write_json(out / "smatrix.json", summary)
    print(f"unitarity_max {res['unitarity_max']:.3e}  reciprocity_max {res['reciprocity_max']:.3e}")
    return 0


def cmd_delay(args, scn, out: Path):
    basis, packet = scn.basis, scn.packet()
    sweep = _run_sweep(args, scn)
    delay = ew_delay(sweep, scn.stencil_order)
    en = scn.packet_energies()
    ew = ew_expectation(packet, sweep, basis, en, delay=delay)
    comm = commutator_expectation(packet, sweep, basis, en)
    cfg = scn.time_config(t0=args.t0, dt=args.dt)
    r_max = args.r_max if args.r_max is not None else scn.r_max
    if r_max > 0.5 * cfg.half_extent + 1e-12:
        raise ConfigError("--r-max exceeds half of time_domain.half_extent", invariant="r_max<=X/2",
                          r_max=r_max, X=cfg.half_extent)
    radii = scn.radii(r_max)
    rec = time_delay(packet, sweep, radii, basis, scn.potential, cfg)
    atomic_export(out / "sojourn.csv", rec.write_csv)
    rec_radii = cfg.record_radii or tuple(radii)
    write_table(out / "trace.csv", ["t"] + [f"r={r:.6g}" for r in rec_radii],
                (np.concatenate([[t], row]) for t, row in zip(rec.trace_times, rec.trace)))
    gap = checks.rel_gap(rec.tau[-1], ew)
    summary = _summary(scn, "delay", tau_plateau=rec.plateau, plateau_slope=rec.plateau_slope,
                       tau_r_max=rec.tau[-1], tau_free_r_max=rec.tau_free[-1], ew_expectation=ew,
                       commutator_expectation=comm, relative_gap=gap, r_max=r_max,
                       residuals=dict(sweep.max_residuals(), hermiticity_max=delay.max_hermiticity),
                       tail_bounds=rec.tail_bounds, diagnostics=rec.diagnostics,
                       ok=gap <= scn.tolerances["delay_gap"])
    write_json(out / "delay.json", summary)
    print(f"tau_plateau {rec.plateau:.10g}  ew_expectation {ew:.10g}  relative_gap {gap:.3e}")
    return 0


def cmd_sojourn(args, scn, out: Path):
    basis, packet = scn.basis, scn.packet()
    sweep = _run_sweep(args, scn)
    radii = scn.radii(args.r_max)
    scattered = scatter_packet(packet, sweep, basis)
    tf, a, b = tau_free(packet, scattered, radii, scn.tolerances["tail"])
    write_table(out / "sojourn_free.csv", ["r", "T0_r_phi", "T0_r_Sphi", "tau_r_free"],
                zip(radii, a.total, b.total, tf))
    fib = forward_transform(packet, scn.packet_energies(), basis)
    atomic_export(out / "fiber.csv", fib.write_csv)
    summary = _summary(scn, "sojourn", radii=radii, tau_free=tf, tail_bounds=a.tail_bound + b.tail_bound,
                       packet_norm=packet.norm2(), fiber_norm=fib.norm2(), scattered_norm=scattered.norm2(),
                       residuals=sweep.max_residuals())
    write_json(out / "sojourn.json", summary)
    print(f"tau_free(r_max) {tf[-1]:.10g}")
    return 0


def cmd_verify(args, scn, out: Path):
    suites = list(checks.SUITES) if args.suite == "all" else [args.suite]
    results = {}
    failed = 0
    for name in suites:
        fn = checks.SUITES[name]
        kwargs = {"threads": args.threads} if name != "hygiene" else {}
        try:
            found = fn(scn, **kwargs)
        except ConfigError as exc:
            if args.suite != "all":
                raise
            results[name] = {"skipped": str(exc)}
            print(f"SKIP {name}: {exc}")
            continue
        results[name] = [c.as_dict() for c in found]
        for c in found:
            print(c.line())
            failed += not c.passed
    write_json(out / "verify.json", _summary(scn, "verify", suite=args.suite, checks=results, failed=failed))
    return 1 if failed else 0


COMMANDS = {"modes": cmd_modes, "smatrix": cmd_smatrix, "delay": cmd_delay, "sojourn": cmd_sojourn,
            "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wgdelay", description="Waveguide scattering time delays.")
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", required=True, help="scenario file (YAML or JSON)")
    common.add_argument("--output", help=f"output directory (overrides ${ENV_OUTPUT} and the scenario)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for energy sweeps")
    common.add_argument("-v", "--verbose", action="store_true")
    sweep = argparse.ArgumentParser(add_help=False)
    sweep.add_argument("--lambda-min", type=float)
    sweep.add_argument("--lambda-max", type=float)
    sweep.add_argument("--points", type=int)

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("modes", parents=[common], help="thresholds and coupling matrix")
    sub.add_parser("smatrix", parents=[common, sweep], help="S-matrix and delay matrix on an energy sweep")
    p = sub.add_parser("delay", parents=[common, sweep], help="time-dependent delay of the scenario packet")
    p.add_argument("--r-max", type=float)
    p.add_argument("--t0", type=float)
    p.add_argument("--dt", type=float)
    p = sub.add_parser("sojourn", parents=[common, sweep], help="free sojourn times of phi and S phi")
    p.add_argument("--r-max", type=float)
    p = sub.add_parser("verify", parents=[common], help="run a check suite")
    p.add_argument("--suite", choices=sorted(checks.SUITES) + ["all"], default="all")
    return parser


def run_command(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.output) if args.output else (Path(os.environ[ENV_OUTPUT]) if os.environ.get(ENV_OUTPUT) else None)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1", invariant="threads>=1", threads=args.threads)
        scn = load_scenario(args.scenario)
        out = output_dir(args, scn)
        return COMMANDS[args.command](args, scn, out)
    except WaveguideError as exc:
        report = exc.report()
        report.update(command=args.command, scenario=str(args.scenario))
        text = json.dumps(_num(report), sort_keys=True)
        print(text, file=sys.stderr)
        if out is not None:
            try:
                write_json(out / "error.json", report)
            except OSError:
                pass
        return 2 if isinstance(exc, ConfigError) else 3


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
