"""Synthesis orchestration: guess, continuation, verification, reports.

``continuation_solve`` walks the decreasing epsilon schedule, warm-starting
every stage from the previous solution and subdividing any epsilon step
whose Newton iteration leaves the convergence basin.  ``verify_solution``
re-propagates the solved controls through the structurally independent
unitary oracle and scores the run against conservation and stationarity
checks.  ``export_report`` writes the per-stage CSV/JSON artifact tree and
``verify_files`` re-runs the verification from those stored artifacts
alone.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .basis import (BlochDecomposition, OperatorBasis, StructureConstants,
                    build_basis, decompose, reconstruct, structure_constants)
from .bvp import (STATUS_CONVERGED, BvpProblem, BvpSolution, SolverOptions,
                  evaluate, solve_bvp)
from .dynamics import (BlochTrajectory, ControlTrajectory, FirstIntegralReport,
                       channel_generators, first_integrals,
                       propagate_unitary_oracle, running_terminal_cost,
                       terminal_cost)
from .extremal import ExtremalSystem
from .model import (ExperimentConfig, GateTarget, HamiltonianModel,
                    compile_gate_target, compile_hamiltonian, config_from_dict,
                    config_to_dict)

__all__ = [
    "StageResult", "SynthesisRun", "VerificationReport", "StageVerification",
    "StageFailure", "ArtifactError", "DEFAULT_THRESHOLDS",
    "initial_guess", "continuation_solve", "select_horizon",
    "verify_solution", "export_report", "verify_files", "oracle_step_target",
]

SUMMARY_SCHEMA = "gatesynth-run/1"
VERIFICATION_SCHEMA = "gatesynth-verification/1"

#: Verification thresholds applied to exported solutions.  ``oracle_gap``
#: is relative: the gap must stay below value * (1 + terminal cost).
DEFAULT_THRESHOLDS = {
    "first_integrals": 1e-5,
    "oracle_gap": 1e-3,
    "hamiltonian_drift": 1e-2,
    "stationarity": 1e-9,
    "unitarity": 1e-6,
}

_DEFAULT_FINE_POINTS = 1001
_SUBSTEP_RATIO = 2.5        # largest epsilon ratio attempted in one step
_MIN_SUBSTEP_RATIO = 1.02   # below this, bisection gives up


class StageFailure(RuntimeError):
    """A continuation stage failed after the mesh-doubling retry."""

    def __init__(self, epsilon: float, message: str):
        super().__init__(f"stage epsilon={epsilon:g}: {message}")
        self.epsilon = epsilon


class ArtifactError(RuntimeError):
    """A stored run directory is missing files or holds corrupt data."""


@dataclass
class StageResult:
    """One converged entry of the epsilon schedule."""

    epsilon: float
    solution: BvpSolution
    terminal_cost: float
    integral_cost: float
    first_integrals: FirstIntegralReport
    hamiltonian_drift: float
    newton_iterations: int          # final solve at this epsilon
    total_newton_iterations: int    # including intermediate epsilon steps
    substeps: tuple[float, ...]     # epsilon values walked to reach this stage
    wall_time: float
    oracle_terminal_cost: float | None = None

    @property
    def nodes(self) -> int:
        return len(self.solution.mesh)


@dataclass
class SynthesisRun:
    """Full continuation history plus the compiled problem objects."""

    config: ExperimentConfig
    stages: list[StageResult]
    timings: dict[str, float]
    status: str                     # "converged" or "failed"
    failed_epsilon: float | None = None
    message: str = ""
    model: HamiltonianModel = field(default=None, repr=False)
    target: GateTarget = field(default=None, repr=False)
    basis: OperatorBasis = field(default=None, repr=False)
    sc: StructureConstants = field(default=None, repr=False)

    @property
    def costs(self) -> dict[float, float]:
        return {s.epsilon: s.terminal_cost for s in self.stages}


@dataclass(frozen=True)
class VerificationReport:
    """Independent quality scores for one converged stage."""

    first_integral_norm: float
    first_integral_component: float
    bloch_terminal_cost: float
    oracle_terminal_cost: float
    oracle_gap: float
    hamiltonian_drift: float
    stationarity_max: float
    unitarity_defect: float
    fine_points: int
    step_target: float

    def failures(self, thresholds: dict | None = None) -> list[str]:
        """Names of the thresholds this report violates."""
        th = DEFAULT_THRESHOLDS if thresholds is None else thresholds
        out = []
        if max(self.first_integral_norm, self.first_integral_component) \
                > th["first_integrals"]:
            out.append("first_integrals")
        if self.oracle_gap > th["oracle_gap"] * (1.0 + self.bloch_terminal_cost):
            out.append("oracle_gap")
        if self.hamiltonian_drift > th["hamiltonian_drift"]:
            out.append("hamiltonian_drift")
        if self.stationarity_max > th["stationarity"]:
            out.append("stationarity")
        if self.unitarity_defect > th["unitarity"]:
            out.append("unitarity")
        return out

    def to_dict(self) -> dict:
        return {
            "first_integral_norm": self.first_integral_norm,
            "first_integral_component": self.first_integral_component,
            "bloch_terminal_cost": self.bloch_terminal_cost,
            "oracle_terminal_cost": self.oracle_terminal_cost,
            "oracle_gap": self.oracle_gap,
            "hamiltonian_drift": self.hamiltonian_drift,
            "stationarity_max": self.stationarity_max,
            "unitarity_defect": self.unitarity_defect,
            "fine_points": self.fine_points,
            "step_target": self.step_target,
        }


@dataclass(frozen=True)
class StageVerification:
    """Verification outcome for one stage of a stored run."""

    epsilon: float
    report: VerificationReport
    failures: tuple[str, ...]


# ---------------------------------------------------------------------------
# Initial guess
# ---------------------------------------------------------------------------

def initial_guess(model: HamiltonianModel, target: GateTarget, mesh,
                  sc: StructureConstants) -> np.ndarray:
    """Nodal states from zero-control propagation, one column per node.

    The state block follows the free flow from the identity; the costate
    block follows the same flow backwards from -target at the final time.
    Both are exact matrix exponentials of the free generator, so the
    boundary conditions and the unitarity first integrals hold to
    round-off by construction.
    """
    x = np.asarray(mesh, dtype=float)
    if x.ndim != 1 or len(x) < 2 or x[0] != 0.0 or np.any(np.diff(x) <= 0):
        raise ValueError("mesh must be a strictly increasing 1-D array starting at 0")
    A_free, _ = channel_generators(model, sc)
    lam, V = np.linalg.eigh(A_free)
    T = x[-1]
    e1 = np.zeros(A_free.shape[0], dtype=np.complex128)
    e1[0] = 1.0
    G = np.concatenate(([target.g0], target.g))
    W = V @ (np.exp(-1j * lam[:, None] * x[None, :]) * (V.conj().T @ e1)[:, None])
    Q = V @ (np.exp(-1j * lam[:, None] * (x[None, :] - T)) * (V.conj().T @ (-G))[:, None])
    system = ExtremalSystem(model, target, 1.0, sc)
    Y = system.encoding.join(W, Q)
    if not np.all(np.isfinite(Y)):
        raise ValueError("free propagation produced non-finite guess states")
    return Y


# ---------------------------------------------------------------------------
# Continuation
# ---------------------------------------------------------------------------

def _solver_options(config: ExperimentConfig,
                    options: SolverOptions | None) -> SolverOptions:
    if options is not None:
        return options
    return SolverOptions(tol=config.tol, max_nodes=config.max_nodes)


def _solve_stage(model, target, sc, epsilon, horizon, x, Y, options):
    system = ExtremalSystem(model, target, epsilon, sc)
    problem = BvpProblem(n=system.size, rhs=system.rhs, bc=system.boundary,
                         a=0.0, b=horizon, rhs_jac=system.jacobian,
                         bc_jac=system.boundary_jacobian)
    sol = solve_bvp(problem, x, Y, options)
    W, _ = system.encoding.split(sol.states)
    cost = terminal_cost(W[0, -1], W[1:, -1], target)
    return system, sol, cost


def continuation_solve(config: ExperimentConfig, *,
                       options: SolverOptions | None = None,
                       substep_ratio: float = _SUBSTEP_RATIO,
                       progress=None) -> SynthesisRun:
    """Solve the extremal BVP at every epsilon of the schedule.

    The first stage starts from the zero-control guess.  Later stages
    warm-start from the previous solution; the epsilon gap is covered by
    log-spaced intermediate steps with ratio at most ``substep_ratio``.
    A step whose Newton iteration fails shrinks the working ratio (square
    root in log space) and replans from the last converged epsilon; the
    working ratio regrows after repeated easy successes, so one hard
    epsilon region is crossed at a small, learned step size without
    re-attempting jumps that already failed.  When even the ratio floor
    fails, the stage gets one retry on a doubled mesh; failing that, the
    run is marked failed and the earlier stages are kept.
    """
    say = progress if progress is not None else (lambda msg: None)
    opts = _solver_options(config, options)
    if opts.stall_patience is None:
        # warm restarts sit close to the new solution, so a Newton run
        # that keeps contracting weakly is off the branch; detect that
        # early instead of burning the full iteration budget
        warm_opts = dataclasses.replace(opts, stall_patience=3)
    else:
        warm_opts = opts
    basis = build_basis(config.ham.dim)
    sc = structure_constants(basis)
    model = compile_hamiltonian(config.ham, basis)
    target = compile_gate_target(config.gate_unitary, config.gate_phase, basis)
    T = config.horizon
    timings: dict[str, float] = {}
    t_total = time.perf_counter()

    t0 = time.perf_counter()
    x = np.linspace(0.0, T, config.mesh)
    Y = initial_guess(model, target, x, sc)
    timings["initial_guess"] = time.perf_counter() - t0

    run = SynthesisRun(config=config, stages=[], timings=timings,
                       status="converged", model=model, target=target,
                       basis=basis, sc=sc)

    def attempt(eps, x, Y, warm=False):
        o = warm_opts if warm else opts
        _, sol, cost = _solve_stage(model, target, sc, eps, T, x, Y, o)
        return sol, cost

    schedule = config.epsilon_schedule
    prev_sol = None
    ratio = [max(substep_ratio, _MIN_SUBSTEP_RATIO)]
    easy = [0]
    for i, eps in enumerate(schedule):
        t0 = time.perf_counter()
        counter = [0]
        walked: list[float] = []
        try:
            if i == 0:
                sol, cost = attempt(eps, x, Y)
                counter[0] += sol.newton_iterations
                if sol.status != STATUS_CONVERGED:
                    say(f"  cold stage epsilon={eps:g} failed ({sol.message}); "
                        f"retrying on doubled mesh")
                    xd = np.linspace(0.0, T, 2 * config.mesh)
                    Yd = initial_guess(model, target, xd, sc)
                    sol, cost = attempt(eps, xd, Yd)
                    counter[0] += sol.newton_iterations
                    if sol.status != STATUS_CONVERGED:
                        raise StageFailure(eps, sol.message)
                walked.append(eps)
            else:
                # bounded sub-steps keep every continuation step inside
                # the Newton basin of the tracked extremal branch; large
                # jumps can converge to a different branch
                def walk(base_sol):
                    cur, c, e_cur = base_sol, None, schedule[i - 1]
                    while e_cur > eps:
                        r = min(ratio[0], substep_ratio)
                        k = max(1, math.ceil(round(
                            math.log(e_cur / eps) / math.log(r), 9)))
                        e_next = eps if k == 1 else (
                            e_cur * (eps / e_cur) ** (1.0 / k))
                        nxt, c_try = attempt(e_next, cur.mesh, cur.states,
                                             warm=True)
                        counter[0] += nxt.newton_iterations
                        if nxt.status == STATUS_CONVERGED:
                            say(f"  epsilon {e_cur:g} -> {e_next:g}: "
                                f"{nxt.newton_iterations} Newton iterations, "
                                f"{len(nxt.mesh)} nodes, cost {c_try:.6g}")
                            walked.append(e_next)
                            cur, c, e_cur = nxt, c_try, e_next
                            easy[0] = easy[0] + 1 if nxt.newton_iterations <= 5 else 0
                            if easy[0] >= 2 and ratio[0] < substep_ratio:
                                ratio[0] = min(substep_ratio, ratio[0] * 1.35)
                                easy[0] = 0
                        else:
                            stepped = e_cur / e_next
                            if stepped < _MIN_SUBSTEP_RATIO:
                                raise StageFailure(e_next, nxt.message)
                            say(f"  epsilon {e_cur:g} -> {e_next:g} failed "
                                f"({nxt.message}); reducing step")
                            ratio[0] = math.sqrt(stepped)
                            easy[0] = 0
                    return cur, c
                try:
                    sol, cost = walk(prev_sol)
                except StageFailure:
                    say(f"  stage epsilon={eps:g} failed; retrying on doubled mesh")
                    xd = np.linspace(0.0, T, 2 * len(prev_sol.mesh))
                    Yd = evaluate(prev_sol, xd)
                    doubled = dataclasses.replace(prev_sol, mesh=xd, states=Yd)
                    walked.clear()
                    ratio[0] = max(substep_ratio, _MIN_SUBSTEP_RATIO)
                    easy[0] = 0
                    sol, cost = walk(doubled)
        except StageFailure as exc:
            run.status = "failed"
            run.failed_epsilon = eps
            run.message = str(exc)
            say(f"  run failed at epsilon={eps:g}: {exc}")
            break

        stage = _make_stage(model, target, sc, eps, sol, cost,
                            counter[0], tuple(walked),
                            time.perf_counter() - t0)
        run.stages.append(stage)
        timings[f"stage-{eps:g}"] = stage.wall_time
        say(f"stage epsilon={eps:g}: cost {cost:.6g} "
            f"({stage.nodes} nodes, {stage.wall_time:.1f}s)")
        prev_sol = sol

    timings["total"] = time.perf_counter() - t_total
    return run


def _make_stage(model, target, sc, eps, sol, cost, total_iters, walked,
                wall_time, fine_points: int = _DEFAULT_FINE_POINTS):
    """Assemble the per-stage record with its cheap diagnostics."""
    system = ExtremalSystem(model, target, eps, sc)
    tf = np.linspace(sol.mesh[0], sol.mesh[-1], fine_points)
    Yf = evaluate(sol, tf)
    W, _ = system.encoding.split(Yf)
    nu = system.feedback(Yf)
    integrand = system.epsilon * (model.weights @ nu ** 2)
    integral_cost = 0.5 * float(np.trapezoid(integrand, tf))
    fi = first_integrals(BlochTrajectory(tf, W[0], W[1:]), sc)
    H = system.hamiltonian_values(Yf)
    drift = float(np.abs(H - H[0]).max())
    return StageResult(epsilon=eps, solution=sol, terminal_cost=cost,
                       integral_cost=integral_cost, first_integrals=fi,
                       hamiltonian_drift=drift,
                       newton_iterations=sol.newton_iterations,
                       total_newton_iterations=total_iters,
                       substeps=walked, wall_time=wall_time)


# ---------------------------------------------------------------------------
# Horizon selection
# ---------------------------------------------------------------------------

def select_horizon(config: ExperimentConfig, T_max: float, *,
                   epsilon: float | None = None,
                   options: SolverOptions | None = None,
                   scan_points: int = 2001, max_iter: int = 5,
                   rel_tol: float = 0.01) -> float:
    """Pick a generation time by scanning the solved trajectory.

    Solves one stage on [0, T], locates the interior minimizer of the
    running terminal-cost curve 0.5*|W(t) - G|^2, moves T there, and
    repeats until the change drops below ``rel_tol`` (relative) or
    ``max_iter`` rounds have run.  The scan uses the first scheduled
    epsilon unless one is given.  Without an interior minimum below the
    final-time value the current T is returned with a warning.
    """
    if not (T_max > 0 and math.isfinite(T_max)):
        raise ValueError(f"T_max must be positive, got {T_max}")
    eps = config.epsilon_schedule[0] if epsilon is None else float(epsilon)
    basis = build_basis(config.ham.dim)
    sc = structure_constants(basis)
    model = compile_hamiltonian(config.ham, basis)
    target = compile_gate_target(config.gate_unitary, config.gate_phase, basis)
    opts = _solver_options(config, options)

    T = float(T_max)
    for _ in range(max_iter):
        x = np.linspace(0.0, T, config.mesh)
        Y = initial_guess(model, target, x, sc)
        system, sol, _ = _solve_stage(model, target, sc, eps, T, x, Y, opts)
        if sol.status != STATUS_CONVERGED:
            raise StageFailure(eps, f"horizon scan solve failed: {sol.message}")
        tf = np.linspace(0.0, T, scan_points)
        W, _ = system.encoding.split(evaluate(sol, tf))
        vals = running_terminal_cost(BlochTrajectory(tf, W[0], W[1:]), target)
        interior = slice(1, -1)
        idx = 1 + int(np.argmin(vals[interior]))
        # an acceptable minimizer must beat the final-time value and sit
        # away from t=0, where the identity start makes the cost degenerate
        if vals[idx] >= vals[-1] or tf[idx] <= 0.01 * T:
            warnings.warn(
                f"no interior terminal-cost minimum on [0, {T:g}]; keeping T={T:g}",
                stacklevel=2)
            return T
        T_new = float(tf[idx])
        if abs(T_new - T) < rel_tol * T:
            return T_new
        T = T_new
    return T


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

def oracle_step_target(dim: int) -> float:
    """Richardson tolerance for the unitary oracle, scaled by system size.

    The oracle stepper is second order, so meeting very tight targets on
    long horizons is disproportionately expensive for larger systems;
    these defaults stay a factor of at least ten below every verification
    threshold that consumes the result.
    """
    if dim <= 2:
        return 1e-8
    if dim <= 4:
        return 1e-6
    return 1e-5


def _verify_arrays(model, target, sc, basis, ham_spec, epsilon, tf, Yf, nu,
                   *, step_target: float | None, fine_points: int):
    """Score stored or freshly interpolated trajectory data."""
    system = ExtremalSystem(model, target, epsilon, sc)
    W, _ = system.encoding.split(Yf)
    bloch_cost = terminal_cost(W[0, -1], W[1:, -1], target)
    fi = first_integrals(BlochTrajectory(tf, W[0], W[1:]), sc)
    H = system.hamiltonian_values(Yf)
    drift = float(np.abs(H - H[0]).max())
    stat = float(np.abs(system.stationarity_values(Yf, nu)).max())
    U_bloch = reconstruct(BlochDecomposition(W[0, -1], W[1:, -1]), basis)
    unitarity = float(np.abs(U_bloch.conj().T @ U_bloch
                             - np.eye(basis.dim)).max())
    target_step = oracle_step_target(basis.dim) if step_target is None \
        else float(step_target)
    controls = ControlTrajectory(tf, nu, kind="cubic")
    U = propagate_unitary_oracle(ham_spec, controls, tf, step_target=target_step)
    dec = decompose(U[-1], basis)
    oracle_cost = terminal_cost(dec.scalar, dec.vec, target)
    return VerificationReport(
        first_integral_norm=fi.norm_max,
        first_integral_component=fi.component_max,
        bloch_terminal_cost=bloch_cost,
        oracle_terminal_cost=oracle_cost,
        oracle_gap=abs(oracle_cost - bloch_cost),
        hamiltonian_drift=drift,
        stationarity_max=stat,
        unitarity_defect=unitarity,
        fine_points=fine_points,
        step_target=target_step,
    )


def verify_solution(run: SynthesisRun, stage: int, *,
                    fine_points: int = _DEFAULT_FINE_POINTS,
                    step_target: float | None = None) -> VerificationReport:
    """Re-derive controls from one stage and check it against the oracle.

    Controls are recovered by evaluating the feedback law on the solution
    interpolant over a fine uniform grid, then fed to the independent
    unitary propagator; the report compares the two terminal costs and
    adds conservation, stationarity and unitarity scores.  Also fills the
    stage's ``oracle_terminal_cost``.
    """
    entry = run.stages[stage]
    sol = entry.solution
    system = ExtremalSystem(run.model, run.target, entry.epsilon, run.sc)
    tf = np.linspace(sol.mesh[0], sol.mesh[-1], fine_points)
    Yf = evaluate(sol, tf)
    nu = system.feedback(Yf)
    report = _verify_arrays(run.model, run.target, run.sc, run.basis,
                            run.config.ham, entry.epsilon, tf, Yf, nu,
                            step_target=step_target, fine_points=fine_points)
    entry.oracle_terminal_cost = report.oracle_terminal_cost
    return report


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

def _eps_tag(eps: float) -> str:
    return f"{eps:g}"


def _bloch_header(dim: int) -> str:
    n = dim * dim - 1
    cols = ["time", "re_u0", "im_u0"]
    cols += [f"re_u{j}" for j in range(1, n + 1)]
    cols += [f"im_u{j}" for j in range(1, n + 1)]
    cols += ["re_p0", "im_p0"]
    cols += [f"re_p{j}" for j in range(1, n + 1)]
    cols += [f"im_p{j}" for j in range(1, n + 1)]
    return ",".join(cols)


def _write_csv(path: Path, header: str, columns) -> None:
    table = np.column_stack(columns)
    np.savetxt(path, table, delimiter=",", header=header, comments="",
               fmt="%.17g")


def export_report(run: SynthesisRun, directory, *,
                  fine_points: int = _DEFAULT_FINE_POINTS,
                  step_target: float | None = None,
                  thresholds: dict | None = None) -> Path:
    """Write summary.json plus per-stage CSVs and verification reports.

    Layout: ``<dir>/summary.json`` and, per stage,
    ``<dir>/stage-<eps>/{controls.csv,bloch.csv,terminal_running.csv,
    verification.json}``.  Every CSV carries a header row and one row per
    fine-grid point; floats are written with full precision so stored
    states reproduce the in-memory verification scores.
    """
    if not run.stages:
        raise ValueError("cannot export an empty run")
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    stage_entries = []
    for i, entry in enumerate(run.stages):
        report = verify_solution(run, i, fine_points=fine_points,
                                 step_target=step_target)
        stage_dir = out / f"stage-{_eps_tag(entry.epsilon)}"
        stage_dir.mkdir(exist_ok=True)
        sol = entry.solution
        system = ExtremalSystem(run.model, run.target, entry.epsilon, run.sc)
        tf = np.linspace(sol.mesh[0], sol.mesh[-1], fine_points)
        Yf = evaluate(sol, tf)
        W, _ = system.encoding.split(Yf)
        nu = system.feedback(Yf)
        _write_csv(stage_dir / "controls.csv",
                   ",".join(["time"] + [f"nu_{lb}" for lb in run.model.labels]),
                   [tf] + [nu[l] for l in range(len(run.model.labels))])
        _write_csv(stage_dir / "bloch.csv", _bloch_header(run.basis.dim),
                   [tf, Yf.T])
        vals = running_terminal_cost(BlochTrajectory(tf, W[0], W[1:]),
                                     run.target)
        _write_csv(stage_dir / "terminal_running.csv", "time,terminal_cost",
                   [tf, vals])
        failures = report.failures(thresholds)
        ver = {
            "schema": VERIFICATION_SCHEMA,
            "epsilon": entry.epsilon,
            "report": report.to_dict(),
            "thresholds": DEFAULT_THRESHOLDS if thresholds is None else thresholds,
            "failures": failures,
            "passed": not failures,
        }
        with open(stage_dir / "verification.json", "w") as fh:
            json.dump(ver, fh, indent=2)
            fh.write("\n")
        stage_entries.append({
            "epsilon": entry.epsilon,
            "terminal_cost": entry.terminal_cost,
            "integral_cost": entry.integral_cost,
            "oracle_terminal_cost": entry.oracle_terminal_cost,
            "newton_iterations": entry.newton_iterations,
            "total_newton_iterations": entry.total_newton_iterations,
            "substeps": list(entry.substeps),
            "nodes": entry.nodes,
            "wall_time": entry.wall_time,
            "hamiltonian_drift": entry.hamiltonian_drift,
            "first_integral_norm": entry.first_integrals.norm_max,
            "first_integral_component": entry.first_integrals.component_max,
            "verification_passed": not failures,
        })
    summary = {
        "schema": SUMMARY_SCHEMA,
        "label": run.config.label,
        "status": run.status,
        "failed_epsilon": run.failed_epsilon,
        "message": run.message,
        "horizon": run.config.horizon,
        "config": config_to_dict(run.config),
        "costs": {_eps_tag(s.epsilon): s.terminal_cost for s in run.stages},
        "stages": stage_entries,
        "final_mesh": run.stages[-1].nodes,
        "fine_points": fine_points,
        "timings": run.timings,
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    return out


# ---------------------------------------------------------------------------
# Verification from stored artifacts
# ---------------------------------------------------------------------------

def _load_csv(path: Path, expect_cols: int | None = None) -> np.ndarray:
    if not path.is_file():
        raise ArtifactError(f"missing file: {path}")
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise ArtifactError(f"corrupt CSV {path}: {exc}") from exc
    if data.size == 0:
        raise ArtifactError(f"empty CSV: {path}")
    if expect_cols is not None and data.shape[1] != expect_cols:
        raise ArtifactError(
            f"{path}: expected {expect_cols} columns, found {data.shape[1]}")
    return data


def verify_files(run_dir, *, step_target: float | None = None,
                 thresholds: dict | None = None) -> list[StageVerification]:
    """Re-run verification using only the exported files of a run.

    Rebuilds the model from the stored config, reads states and controls
    back from the stage CSVs, and scores them with the same checks used
    on live solutions.  Unlike ``verify_solution`` the controls come from
    the file, so tampering with ``controls.csv`` shows up in the oracle
    gap and the stationarity residual.
    """
    root = Path(run_dir)
    summary_path = root / "summary.json"
    if not summary_path.is_file():
        raise ArtifactError(f"missing file: {summary_path}")
    try:
        with open(summary_path) as fh:
            summary = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"corrupt summary.json: {exc}") from exc
    if summary.get("schema") != SUMMARY_SCHEMA:
        raise ArtifactError(
            f"unsupported summary schema {summary.get('schema')!r}")
    try:
        config = config_from_dict(summary["config"])
        stage_list = summary["stages"]
    except (KeyError, TypeError) as exc:
        raise ArtifactError(f"summary.json missing fields: {exc}") from exc

    basis = build_basis(config.ham.dim)
    sc = structure_constants(basis)
    model = compile_hamiltonian(config.ham, basis)
    target = compile_gate_target(config.gate_unitary, config.gate_phase, basis)
    size = 4 * config.ham.dim ** 2
    n_ch = len(model.labels)

    out = []
    for entry in stage_list:
        eps = float(entry["epsilon"])
        stage_dir = root / f"stage-{_eps_tag(eps)}"
        bloch = _load_csv(stage_dir / "bloch.csv", 1 + size)
        controls = _load_csv(stage_dir / "controls.csv", 1 + n_ch)
        tf = bloch[:, 0]
        if len(tf) < 2 or np.any(np.diff(tf) <= 0):
            raise ArtifactError(f"{stage_dir}/bloch.csv: bad time column")
        if controls.shape[0] != bloch.shape[0] \
                or not np.allclose(controls[:, 0], tf):
            raise ArtifactError(
                f"{stage_dir}: controls.csv and bloch.csv time grids differ")
        Yf = bloch[:, 1:].T
        nu = controls[:, 1:].T
        report = _verify_arrays(model, target, sc, basis, config.ham, eps,
                                tf, Yf, nu, step_target=step_target,
                                fine_points=len(tf))
        out.append(StageVerification(epsilon=eps, report=report,
                                     failures=tuple(report.failures(thresholds))))
    return out
