"""Command-line front end.

Subcommands: ``preset`` (run a named experiment), ``synthesize`` (run a
JSON config), ``verify`` (re-check a stored run directory), ``basis``
(dump operators and structure constants), and ``plot-data`` (flatten a
run directory into tidy long-format tables).

Exit codes are the machine contract: 0 success, 1 usage/config/artifact
problems, 2 solver failure, 3 verification failure.  The pipeline is
deterministic end to end, so there is no seed option.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .basis import (ORDERING_TAG, build_basis, structure_constants)
from .driver import (ArtifactError, continuation_solve, export_report,
                     verify_files, verify_solution)
from .model import (ConfigError, PRESET_EXPERIMENTS, load_config,
                    preset_experiment)

__all__ = [
    "main", "build_parser", "dump_basis", "load_basis_dump",
    "EXIT_OK", "EXIT_USAGE", "EXIT_SOLVER", "EXIT_VERIFY",
]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_SOLVER = 2
EXIT_VERIFY = 3


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="gatesynth",
        description="Synthesize control pulses that generate quantum gates.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add_solver_flags(p):
        p.add_argument("--output", "-o", metavar="DIR",
                       help="write summary.json and per-stage artifacts here")
        p.add_argument("--epsilon", type=float, nargs="+", metavar="E",
                       help="override the decreasing epsilon schedule")
        p.add_argument("--tol", type=float, help="override the defect tolerance")
        p.add_argument("--mesh", type=int, help="override the initial mesh size")

    p = sub.add_parser("preset", help="run a built-in experiment",
                       description="Run one named experiment, or all of them.")
    p.add_argument("name", nargs="?", choices=PRESET_EXPERIMENTS,
                   help="experiment name")
    p.add_argument("--all", action="store_true",
                   help="run every preset, one worker thread each")
    add_solver_flags(p)

    p = sub.add_parser("synthesize", help="run an experiment from a JSON config",
                       description="Run the synthesis pipeline on a config file.")
    p.add_argument("config", help="path to the JSON experiment config")
    add_solver_flags(p)

    p = sub.add_parser("verify", help="re-check a stored run directory",
                       description="Re-run verification from exported files only.")
    p.add_argument("run_dir", help="directory written by a previous run")

    p = sub.add_parser("basis", help="dump basis operators and structure constants",
                       description="Write the operator basis and its structure "
                                   "constants as triplet CSV files.")
    p.add_argument("dim", type=int, help="Hilbert-space dimension (2, 4, 8, ...)")
    p.add_argument("--output", "-o", metavar="DIR", default=".",
                   help="directory for the CSV files (default: current)")

    p = sub.add_parser("plot-data", help="flatten a run directory into tidy tables",
                       description="Merge per-stage CSVs into long-format tables "
                                   "ready for external plotting.")
    p.add_argument("run_dir", help="directory written by a previous run")
    p.add_argument("--output", "-o", metavar="DIR",
                   help="destination directory (default: <run_dir>/plot-data)")
    return parser


# ---------------------------------------------------------------------------
# Shared pipeline
# ---------------------------------------------------------------------------

def _apply_overrides(config, args):
    changes = {}
    if args.epsilon is not None:
        changes["epsilon_schedule"] = tuple(args.epsilon)
    if args.tol is not None:
        changes["tol"] = args.tol
    if args.mesh is not None:
        changes["mesh"] = args.mesh
    return dataclasses.replace(config, **changes) if changes else config


def _run_pipeline(config, output, emit) -> int:
    """Solve, verify, optionally export; returns the exit code."""
    run = continuation_solve(config)
    costs = " | ".join(f"eps {s.epsilon:g} -> cost {s.terminal_cost:.6f}"
                       for s in run.stages)
    emit(f"{config.label}: {costs}")
    if run.stages:
        emit(f"{config.label}: final mesh {run.stages[-1].nodes} nodes")
    if run.status != "converged":
        emit(f"{config.label}: solver failed at epsilon={run.failed_epsilon:g}: "
             f"{run.message}")
        return EXIT_SOLVER

    if output is not None:
        out = export_report(run, output)
        emit(f"{config.label}: report written to {out}")
        failures = {}
        for stage in run.stages:
            ver = json.loads((out / f"stage-{stage.epsilon:g}" /
                              "verification.json").read_text())
            if ver["failures"]:
                failures[stage.epsilon] = ver["failures"]
    else:
        failures = {}
        for i, stage in enumerate(run.stages):
            bad = verify_solution(run, i).failures()
            if bad:
                failures[stage.epsilon] = bad

    if failures:
        for eps, names in failures.items():
            emit(f"{config.label}: stage epsilon={eps:g} FAILED verification "
                 f"[{', '.join(names)}]")
        return EXIT_VERIFY
    emit(f"{config.label}: verification passed on all "
         f"{len(run.stages)} stages")
    return EXIT_OK


def _cmd_preset(args, parser) -> int:
    if args.all == (args.name is not None):
        parser.error("give exactly one of a preset name or --all")
    if not args.all:
        config = _apply_overrides(preset_experiment(args.name), args)
        out = Path(args.output) if args.output else None
        return _run_pipeline(config, out, print)

    # independent runs in parallel; continuation within a run stays
    # sequential.  Warm the structure-constant cache up front so the
    # workers only ever read it.
    configs = [_apply_overrides(preset_experiment(n), args)
               for n in PRESET_EXPERIMENTS]
    for d in sorted({c.ham.dim for c in configs}):
        structure_constants(build_basis(d))

    def work(config):
        lines = []
        out = Path(args.output) / config.label if args.output else None
        code = _run_pipeline(config, out, lines.append)
        return code, lines

    with ThreadPoolExecutor(max_workers=len(configs)) as pool:
        results = list(pool.map(work, configs))
    for _, lines in results:
        for line in lines:
            print(line)
    return max(code for code, _ in results)


def _cmd_synthesize(args, parser) -> int:
    try:
        config = load_config(args.config)
        config = _apply_overrides(config, args)
    except FileNotFoundError:
        print(f"config file not found: {args.config}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ValueError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.output) if args.output else None
    return _run_pipeline(config, out, print)


def _cmd_verify(args, parser) -> int:
    try:
        results = verify_files(args.run_dir)
    except ArtifactError as exc:
        print(f"cannot verify: {exc}", file=sys.stderr)
        return EXIT_USAGE
    bad = False
    for r in results:
        if r.failures:
            bad = True
            print(f"stage epsilon={r.epsilon:g}: FAILED "
                  f"[{', '.join(r.failures)}]")
        else:
            print(f"stage epsilon={r.epsilon:g}: ok "
                  f"(oracle gap {r.report.oracle_gap:.3e})")
    return EXIT_VERIFY if bad else EXIT_OK


# ---------------------------------------------------------------------------
# Basis dump
# ---------------------------------------------------------------------------

def dump_basis(d: int, directory) -> dict[str, Path]:
    """Write operators and structure constants as triplet CSV files.

    Files carry the ordering tag as a comment line and use 1-based
    indices throughout.  Values are printed with 17 significant digits,
    so loading them back reproduces the in-memory tensors exactly.
    """
    basis = build_basis(d)
    sc = structure_constants(basis)
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    ops_path = out / f"operators-d{d}.csv"
    with open(ops_path, "w") as fh:
        fh.write(f"# ordering: {ORDERING_TAG}\n")
        fh.write("op,row,col,re,im\n")
        for pos in range(1, basis.n_ops + 1):
            op = basis.operator(pos)
            for r, c, v in zip(op.rows, op.cols, op.vals):
                fh.write(f"{pos},{r + 1},{c + 1},{v.real:.17g},{v.imag:.17g}\n")
    paths["operators"] = ops_path

    for name, idx, val in (("g", sc.g_indices, sc.g_values),
                           ("f", sc.f_indices, sc.f_values)):
        path = out / f"structure-{name}-d{d}.csv"
        with open(path, "w") as fh:
            fh.write(f"# ordering: {ORDERING_TAG}\n")
            fh.write("k,m,l,value\n")
            for (k, m, l), v in zip(idx, val):
                fh.write(f"{k + 1},{m + 1},{l + 1},{v:.17g}\n")
        paths[name] = path
    return paths


def load_basis_dump(d: int, directory):
    """Read files written by :func:`dump_basis` back into dense tensors.

    Returns (operators, g, f) with shapes (d^2-1, d, d) and twice
    (d^2-1,)^3.  Raises ValueError when the ordering tag is absent.
    """
    out = Path(directory)
    n = d * d - 1

    def read(path):
        lines = path.read_text().splitlines()
        if not lines or ORDERING_TAG not in lines[0]:
            raise ValueError(f"{path}: missing ordering tag {ORDERING_TAG!r}")
        return [line.split(",") for line in lines[2:]]

    ops = np.zeros((n, d, d), dtype=np.complex128)
    for pos, r, c, re, im in read(out / f"operators-d{d}.csv"):
        ops[int(pos) - 1, int(r) - 1, int(c) - 1] = float(re) + 1j * float(im)
    tensors = []
    for name in ("g", "f"):
        t = np.zeros((n, n, n))
        for k, m, l, v in read(out / f"structure-{name}-d{d}.csv"):
            t[int(k) - 1, int(m) - 1, int(l) - 1] = float(v)
        tensors.append(t)
    return ops, tensors[0], tensors[1]


def _cmd_basis(args, parser) -> int:
    if args.dim < 2:
        parser.error(f"dimension must be at least 2, got {args.dim}")
    if args.dim not in (2, 4, 8):
        print(f"note: d={args.dim} is not a qubit-register dimension; "
              f"{args.dim ** 2 - 1} operators will be written", file=sys.stderr)
    paths = dump_basis(args.dim, args.output)
    for path in paths.values():
        print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Plot data
# ---------------------------------------------------------------------------

def _cmd_plot_data(args, parser) -> int:
    root = Path(args.run_dir)
    summary_path = root / "summary.json"
    if not summary_path.is_file():
        print(f"cannot read run: missing {summary_path}", file=sys.stderr)
        return EXIT_USAGE
    try:
        summary = json.loads(summary_path.read_text())
    except json.JSONDecodeError as exc:
        print(f"cannot read run: corrupt summary.json ({exc})", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.output) if args.output else root / "plot-data"
    out.mkdir(parents=True, exist_ok=True)

    costs_path = out / "costs.csv"
    with open(costs_path, "w") as fh:
        fh.write("epsilon,terminal_cost,integral_cost,oracle_terminal_cost,nodes\n")
        for e in summary["stages"]:
            fh.write(f"{e['epsilon']:g},{e['terminal_cost']:.17g},"
                     f"{e['integral_cost']:.17g},{e['oracle_terminal_cost']:.17g},"
                     f"{e['nodes']}\n")

    controls_path = out / "controls-long.csv"
    running_path = out / "terminal-running-long.csv"
    try:
        with open(controls_path, "w") as fc, open(running_path, "w") as fr:
            fc.write("epsilon,time,channel,value\n")
            fr.write("epsilon,time,terminal_cost\n")
            for e in summary["stages"]:
                eps = e["epsilon"]
                stage = root / f"stage-{eps:g}"
                with open(stage / "controls.csv") as fh:
                    channels = fh.readline().strip().split(",")[1:]
                    for line in fh:
                        vals = line.split(",")
                        for ch, v in zip(channels, vals[1:]):
                            fc.write(f"{eps:g},{vals[0]},{ch},{v.strip()}\n")
                with open(stage / "terminal_running.csv") as fh:
                    fh.readline()
                    for line in fh:
                        t, v = line.split(",")
                        fr.write(f"{eps:g},{t},{v.strip()}\n")
    except OSError as exc:
        print(f"cannot read run: {exc}", file=sys.stderr)
        return EXIT_USAGE
    for path in (costs_path, controls_path, running_path):
        print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

_COMMANDS = {
    "preset": _cmd_preset,
    "synthesize": _cmd_synthesize,
    "verify": _cmd_verify,
    "basis": _cmd_basis,
    "plot-data": _cmd_plot_data,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return _COMMANDS[args.command](args, parser)
    except SystemExit as exc:            # parser.error and --help
        return int(exc.code or 0)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
