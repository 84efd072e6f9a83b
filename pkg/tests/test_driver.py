"""Continuation driver: guess, schedule walk, horizon pick, artifacts."""

import dataclasses
import json
import math
import shutil

import numpy as np
import pytest

from gatesynth.bvp import (
    STATUS_CONVERGED,
    STATUS_NEWTON_FAILED,
    BvpSolution,
    solve_bvp,
)
from gatesynth.driver import (
    DEFAULT_THRESHOLDS,
    ArtifactError,
    SynthesisRun,
    continuation_solve,
    export_report,
    initial_guess,
    oracle_step_target,
    select_horizon,
    verify_files,
    verify_solution,
)
from gatesynth.dynamics import BlochTrajectory, first_integrals
from gatesynth.extremal import ExtremalSystem
from gatesynth.model import (
    ControlChannel,
    ExperimentConfig,
    HamiltonianSpec,
    PauliTerm,
    compile_gate_target,
    compile_hamiltonian,
    preset_experiment,
)

NOT_TABLE = [0.8906, 0.3791, 0.0342, 0.0006]


@pytest.fixture(scope="module")
def not_setup(basis_2, sc_2):
    cfg = preset_experiment("not")
    model = compile_hamiltonian(cfg.ham, basis_2)
    target = compile_gate_target(cfg.gate_unitary, cfg.gate_phase, basis_2)
    return cfg, model, target, basis_2, sc_2


@pytest.fixture(scope="module")
def not_run():
    return continuation_solve(preset_experiment("not"))


@pytest.fixture(scope="module")
def not_export(not_run, tmp_path_factory):
    out = tmp_path_factory.mktemp("report") / "not"
    return export_report(not_run, out)


def identity_idle_config(mesh=30):
    """Zero free Hamiltonian, one X channel, identity target."""
    spec = HamiltonianSpec(
        n_qubits=1, free_terms=(),
        channels=(ControlChannel("x", terms=(PauliTerm("X", 1.0),)),))
    return ExperimentConfig(label="idle", ham=spec, gate_unitary=np.eye(2),
                            gate_phase=0.0, horizon=1.0, mesh=mesh)


class TestInitialGuess:
    def test_boundary_conditions_hold_exactly(self, not_setup):
        _, model, target, _, sc = not_setup
        x = np.linspace(0.0, 1.0, 33)
        Y = initial_guess(model, target, x, sc)
        system = ExtremalSystem(model, target, 5.0, sc)
        r = system.boundary(Y[:, 0], Y[:, -1])
        assert np.abs(r).max() < 1e-12

    def test_first_integrals_conserved(self, not_setup):
        _, model, target, _, sc = not_setup
        x = np.linspace(0.0, 1.0, 65)
        Y = initial_guess(model, target, x, sc)
        system = ExtremalSystem(model, target, 5.0, sc)
        W, _ = system.encoding.split(Y)
        fi = first_integrals(BlochTrajectory(x, W[0], W[1:]), sc)
        assert fi.norm_max < 1e-10
        assert fi.component_max < 1e-10

    def test_zero_free_hamiltonian_gives_constant_blocks(self, basis_2, sc_2):
        cfg = identity_idle_config()
        model = compile_hamiltonian(cfg.ham, basis_2)
        target = compile_gate_target(cfg.gate_unitary, cfg.gate_phase, basis_2)
        x = np.linspace(0.0, 1.0, 21)
        Y = initial_guess(model, target, x, sc_2)
        system = ExtremalSystem(model, target, 1.0, sc_2)
        W, Q = system.encoding.split(Y)
        # state block stays at the identity decomposition (1, 0, 0, 0)
        assert np.allclose(W[0], 1.0, atol=1e-14)
        assert np.allclose(W[1:], 0.0, atol=1e-14)
        # costate block stays at minus the target decomposition
        G = np.concatenate([[target.g0], target.g])
        assert np.allclose(Q, -G[:, None], atol=1e-14)

    def test_invalid_mesh_rejected(self, not_setup):
        _, model, target, _, sc = not_setup
        with pytest.raises(ValueError):
            initial_guess(model, target, np.array([0.5, 1.0]), sc)
        with pytest.raises(ValueError):
            initial_guess(model, target, np.array([0.0, 0.5, 0.4]), sc)


class TestContinuation:
    def test_reproduces_published_not_costs(self, not_run):
        costs = [s.terminal_cost for s in not_run.stages]
        assert np.allclose(costs, NOT_TABLE, atol=1e-4)

    def test_costs_strictly_decreasing(self, not_run):
        costs = [s.terminal_cost for s in not_run.stages]
        assert all(a > b for a, b in zip(costs, costs[1:]))

    def test_stage_epsilons_follow_schedule(self, not_run):
        assert [s.epsilon for s in not_run.stages] == [5.0, 0.5, 0.05, 0.005]
        assert not_run.status == "converged"
        assert not_run.failed_epsilon is None

    def test_stage_records_are_consistent(self, not_run):
        cfg = not_run.config
        for stage in not_run.stages:
            assert stage.solution.status == STATUS_CONVERGED
            assert stage.substeps[-1] == stage.epsilon
            assert stage.total_newton_iterations >= stage.newton_iterations
            assert stage.wall_time > 0
            assert stage.nodes >= cfg.mesh
            assert stage.terminal_cost >= 0
            assert stage.integral_cost >= 0

    def test_timings_cover_all_stages(self, not_run):
        keys = set(not_run.timings)
        assert {"initial_guess", "total"} <= keys
        for stage in not_run.stages:
            assert f"stage-{stage.epsilon:g}" in keys

    def test_costs_property_maps_epsilon_to_cost(self, not_run):
        costs = not_run.costs
        assert set(costs) == {5.0, 0.5, 0.05, 0.005}
        assert costs[0.005] == not_run.stages[-1].terminal_cost

    def test_single_entry_schedule_equals_cold_solve(self, not_run):
        cfg = dataclasses.replace(preset_experiment("not"),
                                  epsilon_schedule=(5.0,))
        run = continuation_solve(cfg)
        assert len(run.stages) == 1
        first = not_run.stages[0]
        assert run.stages[0].terminal_cost == pytest.approx(
            first.terminal_cost, abs=1e-12)
        assert run.stages[0].newton_iterations == first.newton_iterations

    def test_warm_start_saves_newton_iterations(self, not_run):
        cfg = dataclasses.replace(preset_experiment("not"),
                                  epsilon_schedule=(0.5,))
        cold = continuation_solve(cfg)
        warm_iters = not_run.stages[1].newton_iterations
        assert warm_iters < cold.stages[0].newton_iterations

    def test_failed_stage_marks_run_and_keeps_earlier_stages(self, monkeypatch):
        calls = {"n": 0}

        def failing_solve(problem, mesh, guess, options=None):
            calls["n"] += 1
            if calls["n"] == 1:
                return solve_bvp(problem, mesh, guess, options)
            x = np.asarray(mesh, dtype=float)
            return BvpSolution(mesh=x, states=np.asarray(guess, dtype=float),
                               interpolant=None,
                               residuals=np.zeros(len(x) - 1),
                               newton_iterations=1,
                               status=STATUS_NEWTON_FAILED,
                               message="forced failure")

        monkeypatch.setattr("gatesynth.driver.solve_bvp", failing_solve)
        run = continuation_solve(preset_experiment("not"))
        assert run.status == "failed"
        assert run.failed_epsilon == 0.5
        assert run.message
        assert len(run.stages) == 1
        assert run.stages[0].epsilon == 5.0
        assert run.stages[0].solution.status == STATUS_CONVERGED


class TestSelectHorizon:
    def test_not_preset_keeps_stated_horizon(self):
        with pytest.warns(UserWarning, match="no interior"):
            T = select_horizon(preset_experiment("not"), 1.0)
        assert T == pytest.approx(1.0)

    def test_monotone_running_cost_returns_T_max(self):
        with pytest.warns(UserWarning, match="no interior"):
            T = select_horizon(preset_experiment("not"), 0.5)
        assert T == pytest.approx(0.5)

    def test_degenerate_identity_target_takes_warning_path(self):
        with pytest.warns(UserWarning, match="no interior"):
            T = select_horizon(identity_idle_config(), 1.0)
        assert T == pytest.approx(1.0)

    def test_interior_minimum_moves_the_horizon(self):
        # free flow exp(-i pi/2 t X) passes exactly through the target
        # at t = 1, so on a longer window the running terminal cost has
        # an interior minimum there and the scan should move T to it
        spec = HamiltonianSpec(
            n_qubits=1, free_terms=(PauliTerm("X", math.pi / 2),),
            channels=(ControlChannel("y", terms=(PauliTerm("Y", 1.0),)),))
        cfg = ExperimentConfig(label="flyby", ham=spec,
                               gate_unitary=-1j * np.array([[0, 1], [1, 0]]),
                               gate_phase=0.0, horizon=2.2, mesh=40)
        with pytest.warns(UserWarning, match="no interior"):
            T = select_horizon(cfg, 2.2)
        assert 0.8 < T < 1.2

    def test_invalid_T_max_rejected(self):
        cfg = preset_experiment("not")
        for bad in (0.0, -1.0, math.inf, math.nan):
            with pytest.raises(ValueError):
                select_horizon(cfg, bad)


class TestVerifySolution:
    def test_final_stage_passes_all_thresholds(self, not_run):
        report = verify_solution(not_run, 3)
        assert report.failures() == []
        assert report.oracle_gap <= 1e-4
        assert report.stationarity_max <= 1e-9
        assert report.unitarity_defect <= 1e-6
        assert report.hamiltonian_drift <= 1e-3
        assert max(report.first_integral_norm,
                   report.first_integral_component) <= 1e-5

    def test_every_stage_passes_default_thresholds(self, not_run):
        for i in range(len(not_run.stages)):
            assert verify_solution(not_run, i).failures() == []

    def test_fills_oracle_terminal_cost(self, not_run):
        report = verify_solution(not_run, 2)
        stage = not_run.stages[2]
        assert stage.oracle_terminal_cost == report.oracle_terminal_cost
        assert report.oracle_terminal_cost == pytest.approx(
            stage.terminal_cost, abs=1e-4)

    def test_oracle_step_targets_scale_with_dimension(self):
        assert oracle_step_target(2) == 1e-8
        assert oracle_step_target(4) == 1e-6
        assert oracle_step_target(8) == 1e-5


class TestExportReport:
    def test_directory_layout(self, not_export):
        assert (not_export / "summary.json").is_file()
        for tag in ("5", "0.5", "0.05", "0.005"):
            stage = not_export / f"stage-{tag}"
            for name in ("controls.csv", "bloch.csv",
                         "terminal_running.csv", "verification.json"):
                assert (stage / name).is_file(), f"missing {stage / name}"

    def test_summary_contents(self, not_export, not_run):
        summary = json.loads((not_export / "summary.json").read_text())
        assert summary["schema"] == "gatesynth-run/1"
        assert summary["label"] == "not"
        assert summary["status"] == "converged"
        assert list(summary["costs"]) == ["5", "0.5", "0.05", "0.005"]
        assert summary["costs"]["0.005"] == pytest.approx(
            not_run.stages[-1].terminal_cost)
        assert summary["final_mesh"] == not_run.stages[-1].nodes
        assert summary["fine_points"] == 1001
        assert summary["config"]["label"] == "not"
        assert len(summary["stages"]) == 4
        assert all(e["verification_passed"] for e in summary["stages"])

    def test_csv_shapes_and_headers(self, not_export):
        stage = not_export / "stage-0.005"
        controls = (stage / "controls.csv").read_text().splitlines()
        assert controls[0] == "time,nu_x"
        assert len(controls) == 1 + 1001
        bloch = (stage / "bloch.csv").read_text().splitlines()
        header = bloch[0].split(",")
        assert header[:3] == ["time", "re_u0", "im_u0"]
        assert len(header) == 1 + 4 * 4          # time + 4 d^2 for d = 2
        assert len(bloch) == 1 + 1001
        running = np.loadtxt(stage / "terminal_running.csv", delimiter=",",
                             skiprows=1)
        assert running.shape == (1001, 2)
        # the curve ends at the terminal cost of the stage
        summary = json.loads((not_export / "summary.json").read_text())
        assert running[-1, 1] == pytest.approx(summary["costs"]["0.005"],
                                               rel=1e-6)

    def test_verification_json_passes(self, not_export):
        ver = json.loads(
            (not_export / "stage-0.005" / "verification.json").read_text())
        assert ver["schema"] == "gatesynth-verification/1"
        assert ver["passed"] is True
        assert ver["failures"] == []
        assert ver["thresholds"] == DEFAULT_THRESHOLDS

    def test_empty_run_rejected(self, tmp_path):
        run = SynthesisRun(config=preset_experiment("not"), stages=[],
                           timings={}, status="failed")
        with pytest.raises(ValueError):
            export_report(run, tmp_path / "empty")

    def test_nested_directory_created(self, not_run, tmp_path):
        out = export_report(not_run, tmp_path / "a" / "b" / "c")
        assert (out / "summary.json").is_file()


class TestVerifyFiles:
    def test_round_trip_is_clean(self, not_export):
        results = verify_files(not_export)
        assert [r.epsilon for r in results] == [5.0, 0.5, 0.05, 0.005]
        for r in results:
            assert r.failures == ()

    def test_perturbed_controls_detected(self, not_export, tmp_path):
        work = tmp_path / "run"
        shutil.copytree(not_export, work)
        path = work / "stage-0.005" / "controls.csv"
        lines = path.read_text().splitlines()
        t, v = lines[500].split(",")
        lines[500] = f"{t},{float(v) + 0.5}"
        path.write_text("\n".join(lines) + "\n")
        results = verify_files(work)
        flagged = {r.epsilon: r.failures for r in results if r.failures}
        assert set(flagged) == {0.005}
        assert "stationarity" in flagged[0.005]

    def test_perturbed_states_detected(self, not_export, tmp_path):
        work = tmp_path / "run"
        shutil.copytree(not_export, work)
        path = work / "stage-0.05" / "bloch.csv"
        lines = path.read_text().splitlines()
        parts = lines[400].split(",")
        parts[3] = str(float(parts[3]) + 0.5)
        lines[400] = ",".join(parts)
        path.write_text("\n".join(lines) + "\n")
        results = verify_files(work)
        flagged = {r.epsilon: r.failures for r in results if r.failures}
        assert set(flagged) == {0.05}
        assert "first_integrals" in flagged[0.05]

    def test_missing_summary_raises(self, tmp_path):
        with pytest.raises(ArtifactError, match="missing"):
            verify_files(tmp_path)

    def test_missing_stage_file_raises(self, not_export, tmp_path):
        work = tmp_path / "run"
        shutil.copytree(not_export, work)
        (work / "stage-0.5" / "bloch.csv").unlink()
        with pytest.raises(ArtifactError, match="missing"):
            verify_files(work)

    def test_corrupt_csv_raises(self, not_export, tmp_path):
        work = tmp_path / "run"
        shutil.copytree(not_export, work)
        (work / "stage-5" / "controls.csv").write_text("time,nu_x\n1,oops\n")
        with pytest.raises(ArtifactError):
            verify_files(work)

    def test_time_grid_mismatch_raises(self, not_export, tmp_path):
        work = tmp_path / "run"
        shutil.copytree(not_export, work)
        path = work / "stage-5" / "controls.csv"
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-100]) + "\n")
        with pytest.raises(ArtifactError, match="time"):
            verify_files(work)

    def test_unsupported_schema_raises(self, not_export, tmp_path):
        work = tmp_path / "run"
        shutil.copytree(not_export, work)
        summary = json.loads((work / "summary.json").read_text())
        summary["schema"] = "something-else/9"
        (work / "summary.json").write_text(json.dumps(summary))
        with pytest.raises(ArtifactError, match="schema"):
            verify_files(work)
