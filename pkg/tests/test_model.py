"""System specs, Bloch compilation, gate targets, presets, config IO."""

import math

import numpy as np
import pytest

from gatesynth.basis import build_basis, decompose
from gatesynth.model import (
    ConfigError,
    ControlChannel,
    CostSpec,
    ExperimentConfig,
    HamiltonianSpec,
    PauliTerm,
    PRESET_EXPERIMENTS,
    compile_gate_target,
    compile_hamiltonian,
    config_from_dict,
    config_to_dict,
    load_config,
    parse_pauli_string,
    preset_experiment,
    preset_gate,
    save_config,
)

SX = np.array([[0, 1], [1, 0]], dtype=complex)
SY = np.array([[0, -1j], [1j, 0]], dtype=complex)
SZ = np.array([[1, 0], [0, -1]], dtype=complex)


class TestPauliStrings:
    def test_single_x(self):
        assert np.array_equal(parse_pauli_string("X", 1.0), SX)

    def test_weighted_two_qubit(self):
        assert np.allclose(parse_pauli_string("ZI", 1.5), 1.5 * np.kron(SZ, np.eye(2)))
        assert np.allclose(parse_pauli_string("YY", 1.25), 1.25 * np.kron(SY, SY))

    def test_three_qubit_order(self):
        # leftmost factor acts on the first qubit
        M = parse_pauli_string("XIZ", 2.0)
        assert np.allclose(M, 2.0 * np.kron(np.kron(SX, np.eye(2)), SZ))

    def test_bad_inputs_rejected(self):
        with pytest.raises(ValueError):
            parse_pauli_string("", 1.0)
        with pytest.raises(ValueError):
            parse_pauli_string("XQ", 1.0)
        with pytest.raises(ValueError):
            parse_pauli_string("X", float("nan"))


class TestHamiltonianCompilation:
    def test_single_qubit_images(self, basis_2):
        spec = preset_experiment("not").ham
        model = compile_hamiltonian(spec, basis_2)
        assert model.h0_free == 0.0
        assert np.allclose(model.h_free, [0.0, 1.0, 1.0], atol=1e-14)
        assert np.allclose(model.channel_h0, [0.0], atol=1e-15)
        assert np.allclose(model.channel_h, [[1.0, 0.0, 0.0]], atol=1e-14)
        assert np.allclose(model.weights, [1.0], atol=1e-12)

    def test_two_qubit_channel_images(self, basis_4):
        model = compile_hamiltonian(preset_experiment("cz").ham, basis_4)
        r = 1 / math.sqrt(2)
        expect = np.zeros((3, 15))
        expect[0, [2, 8]] = r      # X on qubit 1 -> positions 3 and 9
        expect[1, [3, 9]] = r      # Y on qubit 1 -> positions 4 and 10
        expect[2, [0, 10]] = r     # X on qubit 2 -> positions 1 and 11
        assert np.abs(model.channel_h - expect).max() <= 1e-12
        assert np.allclose(model.weights, [1.0, 1.0, 1.0], atol=1e-12)

    def test_two_qubit_free_image(self, basis_4):
        model = compile_hamiltonian(preset_experiment("cz").ham, basis_4)
        w1 = w2 = 2.0
        al, b1, b2 = 1.0, 0.5, 0.75
        expect = np.zeros(15)
        expect[1] = expect[11] = al / math.sqrt(2)
        expect[4] = -b1 / math.sqrt(2)
        expect[6] = b1 / math.sqrt(2)
        expect[12] = (2 * b2 + w2) / (2 * math.sqrt(2))
        expect[13] = (2 * b2 + 2 * w1 - w2) / (2 * math.sqrt(6))
        expect[14] = (-2 * b2 + w1 + w2) / (2 * math.sqrt(3))
        assert np.abs(model.h_free - expect).max() <= 1e-12

    def test_traceless_spec_gives_zero_scalars(self, basis_8):
        model = compile_hamiltonian(preset_experiment("toffoli").ham, basis_8)
        assert model.h0_free == 0.0
        assert np.all(model.channel_h0 == 0.0)

    def test_weight_matches_trace_oracle(self, basis_4):
        spec = preset_experiment("cnot").ham
        model = compile_hamiltonian(spec, basis_4)
        for H, w in zip(spec.channel_operators(), model.weights):
            assert w == pytest.approx(np.trace(H.conj().T @ H).real / 4, abs=1e-12)

    def test_weight_override(self, basis_2):
        spec = preset_experiment("not").ham
        model = compile_hamiltonian(spec, basis_2, weights=[3.5])
        assert model.weights[0] == 3.5
        with pytest.raises(ValueError):
            compile_hamiltonian(spec, basis_2, weights=[1.0, 2.0])
        with pytest.raises(ValueError):
            compile_hamiltonian(spec, basis_2, weights=[-1.0])

    def test_dependent_channels_listed(self, basis_2):
        spec = HamiltonianSpec(
            n_qubits=1,
            free_terms=(PauliTerm("Z", 1.0),),
            channels=(
                ControlChannel("a", terms=(PauliTerm("X", 1.0),)),
                ControlChannel("b", terms=(PauliTerm("X", 2.0),)),
                ControlChannel("c", terms=(PauliTerm("Y", 1.0),)),
            ),
        )
        with pytest.raises(ValueError) as err:
            compile_hamiltonian(spec, basis_2)
        assert "a" in str(err.value) and "b" in str(err.value)
        assert "'c'" not in str(err.value)

    def test_non_hermitian_generator_rejected(self, basis_2):
        spec = HamiltonianSpec(
            n_qubits=1,
            channels=(ControlChannel("bad", matrix=np.array([[0, 1], [0, 0]], dtype=complex)),),
        )
        with pytest.raises(ValueError, match="Hermitian"):
            compile_hamiltonian(spec, basis_2)

    def test_dimension_mismatch_rejected(self, basis_4):
        with pytest.raises(ValueError):
            compile_hamiltonian(preset_experiment("not").ham, basis_4)

    def test_dense_matrix_channel(self, basis_2):
        spec = HamiltonianSpec(
            n_qubits=1,
            channels=(ControlChannel("x", matrix=SX),),
        )
        model = compile_hamiltonian(spec, basis_2)
        assert np.allclose(model.channel_h, [[1, 0, 0]], atol=1e-14)


class TestGateTargets:
    def test_bit_flip_target(self, basis_2):
        U, phase = preset_gate("NOT")
        t = compile_gate_target(U, phase, basis_2)
        assert abs(t.g0) <= 1e-15
        assert np.allclose(t.g, [1j, 0, 0], atol=1e-15)

    def test_phase_gate_target(self, basis_2):
        U, phase = preset_gate("S")
        t = compile_gate_target(U, phase, basis_2)
        assert t.g0 == pytest.approx(1 / math.sqrt(2), abs=1e-14)
        assert np.allclose(t.g, [0, 0, -1j / math.sqrt(2)], atol=1e-14)

    def test_eighth_turn_target(self, basis_2):
        U, phase = preset_gate("T")
        t = compile_gate_target(U, phase, basis_2)
        assert t.g0 == pytest.approx(math.cos(math.pi / 8), abs=1e-14)
        assert np.allclose(t.g, [0, 0, -1j * math.sin(math.pi / 8)], atol=1e-14)

    def test_controlled_flip_target(self, basis_4):
        U, phase = preset_gate("CNOT")
        t = compile_gate_target(U, phase, basis_4)
        q = (1 + 1j)
        assert t.g0 == pytest.approx(q / (2 * math.sqrt(2)), abs=1e-14)
        expect = np.zeros(15, dtype=complex)
        expect[10] = q / 2
        expect[13] = q / (2 * math.sqrt(3))
        expect[14] = q / (2 * math.sqrt(6))
        assert np.abs(t.g - expect).max() <= 1e-14

    def test_controlled_phase_target(self, basis_4):
        U, phase = preset_gate("CZ")
        t = compile_gate_target(U, phase, basis_4)
        expect = np.zeros(15, dtype=complex)
        expect[14] = math.sqrt(3) * (1 + 1j) / (2 * math.sqrt(2))
        assert np.abs(t.g - expect).max() <= 1e-14

    @pytest.mark.parametrize("name", ["NOT", "H", "S", "T", "CNOT", "CZ", "TOFFOLI"])
    def test_unit_norm(self, name):
        U, phase = preset_gate(name)
        b = build_basis(U.shape[0])
        t = compile_gate_target(U, phase, b)
        assert abs(abs(t.g0) ** 2 + np.vdot(t.g, t.g).real - 1) <= 1e-12

    @pytest.mark.parametrize("name", ["NOT", "H", "S", "T", "CNOT", "CZ", "TOFFOLI"])
    def test_phase_reaches_unit_determinant(self, name):
        U, phase = preset_gate(name)
        assert abs(np.linalg.det(np.exp(1j * phase) * U) - 1) <= 1e-10

    def test_matches_direct_decomposition(self, basis_8, rng):
        # two code paths: compile_gate_target vs decompose of the
        # phase-corrected matrix
        from conftest import random_unitary
        U = random_unitary(rng, 8)
        t = compile_gate_target(U, 0.3, basis_8)
        dec = decompose(np.exp(0.3j) * U, basis_8)
        assert abs(t.g0 - dec.scalar) <= 1e-12
        assert np.abs(t.g - dec.vec).max() <= 1e-12

    def test_non_unitary_rejected_with_deviation(self, basis_2):
        with pytest.raises(ValueError, match="deviation"):
            compile_gate_target(1.5 * SX, 0.0, basis_2)

    def test_toffoli_is_permutation(self):
        U, _ = preset_gate("TOFFOLI")
        assert np.array_equal(U[:6, :6], np.eye(6))
        assert U[6, 7] == 1 and U[7, 6] == 1 and U[6, 6] == 0 and U[7, 7] == 0

    def test_unknown_name_rejected(self):
        with pytest.raises(ValueError):
            preset_gate("SWAP")


class TestCostAndConfig:
    def test_cost_spec_validation(self):
        with pytest.raises(ValueError):
            CostSpec(epsilon=0.0, horizon=1.0)
        with pytest.raises(ValueError):
            CostSpec(epsilon=1.0, horizon=-2.0)

    def test_schedule_must_decrease(self):
        cfg = preset_experiment("not")
        with pytest.raises(ConfigError):
            ExperimentConfig(label="x", ham=cfg.ham, gate_unitary=cfg.gate_unitary,
                             gate_phase=cfg.gate_phase, horizon=1.0,
                             epsilon_schedule=(0.5, 0.5))
        with pytest.raises(ConfigError):
            ExperimentConfig(label="x", ham=cfg.ham, gate_unitary=cfg.gate_unitary,
                             gate_phase=cfg.gate_phase, horizon=1.0,
                             epsilon_schedule=(0.5, 0.0))

    def test_preset_parameters(self):
        for name, horizon, mesh in [("not", 1.0, 500), ("h", 1.0, 500),
                                    ("s", 0.6, 500), ("t", 0.3, 500),
                                    ("cnot", 4.75, 250), ("cz", 9.8, 250),
                                    ("toffoli", 7.44, 100)]:
            cfg = preset_experiment(name)
            assert cfg.horizon == horizon
            assert cfg.mesh == mesh
            assert cfg.epsilon_schedule == (5.0, 0.5, 0.05, 0.005)

    def test_toffoli_channel_layout(self):
        cfg = preset_experiment("toffoli")
        layout = {ch.label: ch.terms[0].pauli for ch in cfg.ham.channels}
        assert layout == {"x1": "XII", "x2": "IXI", "y1": "YII", "y3": "IIY"}

    def test_unknown_preset_rejected(self):
        with pytest.raises(ValueError):
            preset_experiment("fredkin")

    @pytest.mark.parametrize("name", PRESET_EXPERIMENTS)
    def test_config_json_round_trip(self, name, tmp_path):
        cfg = preset_experiment(name)
        path = save_config(cfg, tmp_path / f"{name}.json")
        loaded = load_config(path)
        assert loaded.label == cfg.label
        assert loaded.epsilon_schedule == cfg.epsilon_schedule
        assert loaded.horizon == cfg.horizon
        assert loaded.mesh == cfg.mesh
        assert loaded.tol == cfg.tol
        assert np.array_equal(loaded.gate_unitary, cfg.gate_unitary)
        assert loaded.gate_phase == cfg.gate_phase
        assert loaded.ham.free_terms == cfg.ham.free_terms
        assert tuple(ch.label for ch in loaded.ham.channels) == cfg.ham.channel_labels

    def test_gate_preset_reference_in_config(self):
        data = config_to_dict(preset_experiment("not"))
        data["gate"] = {"preset": "NOT"}
        cfg = config_from_dict(data)
        assert np.array_equal(cfg.gate_unitary, SX)
        assert cfg.gate_phase == math.pi / 2

    def test_invalid_configs_report_field(self):
        base = config_to_dict(preset_experiment("not"))
        bad = {**base, "cost": {**base["cost"], "epsilon_schedule": [5.0, 0.0]}}
        with pytest.raises(ConfigError, match="epsilon_schedule"):
            config_from_dict(bad)
        bad = {**base, "cost": {**base["cost"], "horizon": -1}}
        with pytest.raises(ConfigError, match="horizon"):
            config_from_dict(bad)
        bad = {**base, "gate": {}}
        with pytest.raises(ConfigError, match="gate"):
            config_from_dict(bad)
        bad = {**base, "hamiltonian": {**base["hamiltonian"], "channels": []}}
        with pytest.raises(ConfigError, match="channel"):
            config_from_dict(bad)

    def test_mangled_json_file(self, tmp_path):
        p = tmp_path / "broken.json"
        p.write_text("{]")
        with pytest.raises(ConfigError, match="JSON"):
            load_config(p)
