"""Controlled N-qubit system declarations and their Bloch-space form.

A system is a constant free Hamiltonian plus s control channels, each a
real coefficient times a constant Hermitian generator.  Generators are
written as Pauli strings (preferred) or dense Hermitian matrices.
Compilation projects everything onto the operator basis once, giving the
real Bloch images consumed by the dynamics and the extremal system; gate
targets carry the global-phase-corrected Bloch data of the unitary to
generate.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .basis import OperatorBasis, decompose

__all__ = [
    "PauliTerm",
    "ControlChannel",
    "HamiltonianSpec",
    "HamiltonianModel",
    "GateTarget",
    "CostSpec",
    "ExperimentConfig",
    "ConfigError",
    "parse_pauli_string",
    "compile_hamiltonian",
    "compile_gate_target",
    "preset_gate",
    "preset_experiment",
    "config_to_dict",
    "config_from_dict",
    "load_config",
    "save_config",
    "PRESET_GATES",
    "PRESET_EXPERIMENTS",
]

_PAULI = {
    "I": np.eye(2, dtype=np.complex128),
    "X": np.array([[0, 1], [1, 0]], dtype=np.complex128),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=np.complex128),
    "Z": np.array([[1, 0], [0, -1]], dtype=np.complex128),
}


class ConfigError(ValueError):
    """Raised for invalid experiment configurations; message names the field."""


@dataclass(frozen=True)
class PauliTerm:
    """One term ``coeff * P_1 (x) ... (x) P_N`` of a Hamiltonian."""

    pauli: str
    coeff: float

    def __post_init__(self):
        if not self.pauli or any(c not in _PAULI for c in self.pauli):
            raise ValueError(f"pauli string must match [IXYZ]+, got {self.pauli!r}")
        if not math.isfinite(self.coeff):
            raise ValueError(f"coefficient must be finite, got {self.coeff!r}")


def parse_pauli_string(s: str, coeff: float = 1.0) -> np.ndarray:
    """Dense matrix of ``coeff`` times a Kronecker product of Paulis."""
    term = PauliTerm(s, float(coeff))
    out = np.array([[term.coeff]], dtype=np.complex128)
    for c in term.pauli:
        out = np.kron(out, _PAULI[c])
    return out


def _terms_matrix(terms, n_qubits: int) -> np.ndarray:
    d = 2 ** n_qubits
    out = np.zeros((d, d), dtype=np.complex128)
    for t in terms:
        if len(t.pauli) != n_qubits:
            raise ValueError(
                f"pauli string {t.pauli!r} has length {len(t.pauli)}, expected {n_qubits}")
        out += parse_pauli_string(t.pauli, t.coeff)
    return out


@dataclass(frozen=True)
class ControlChannel:
    """A control channel: label plus generator (terms or dense matrix)."""

    label: str
    terms: tuple[PauliTerm, ...] | None = None
    matrix: np.ndarray | None = None

    def __post_init__(self):
        if (self.terms is None) == (self.matrix is None):
            raise ValueError(f"channel {self.label!r}: give exactly one of terms or matrix")

    def operator(self, n_qubits: int) -> np.ndarray:
        if self.terms is not None:
            return _terms_matrix(self.terms, n_qubits)
        return np.asarray(self.matrix, dtype=np.complex128)


@dataclass(frozen=True)
class HamiltonianSpec:
    """Free Hamiltonian plus control channels, before Bloch compilation."""

    n_qubits: int
    free_terms: tuple[PauliTerm, ...] | None = None
    free_matrix: np.ndarray | None = None
    channels: tuple[ControlChannel, ...] = ()

    def __post_init__(self):
        if self.n_qubits < 1:
            raise ValueError(f"n_qubits must be >= 1, got {self.n_qubits}")
        if self.free_terms is not None and self.free_matrix is not None:
            raise ValueError("give at most one of free_terms or free_matrix")
        if not self.channels:
            raise ValueError("at least one control channel is required")
        if len(self.channels) > self.dim ** 2:
            raise ValueError(f"at most d**2 = {self.dim ** 2} channels, got {len(self.channels)}")

    @property
    def dim(self) -> int:
        return 2 ** self.n_qubits

    def free_operator(self) -> np.ndarray:
        if self.free_matrix is not None:
            return np.asarray(self.free_matrix, dtype=np.complex128)
        if self.free_terms is not None:
            return _terms_matrix(self.free_terms, self.n_qubits)
        return np.zeros((self.dim, self.dim), dtype=np.complex128)

    def channel_operators(self) -> list[np.ndarray]:
        return [ch.operator(self.n_qubits) for ch in self.channels]

    @property
    def channel_labels(self) -> tuple[str, ...]:
        return tuple(ch.label for ch in self.channels)


@dataclass(frozen=True)
class HamiltonianModel:
    """Bloch images of the free Hamiltonian and control generators.

    ``h(t) = h_free + sum_l nu_l(t) h_l`` with per-channel running-cost
    weights w_l, defaulting to (h0_l)**2 + ||h_l||**2 (the squared
    Bloch-norm of the generator).
    """

    dim: int
    h0_free: float
    h_free: np.ndarray              # (d**2 - 1,)
    channel_h0: np.ndarray          # (s,)
    channel_h: np.ndarray           # (s, d**2 - 1)
    weights: np.ndarray             # (s,)
    labels: tuple[str, ...]

    @property
    def n_channels(self) -> int:
        return len(self.labels)


def _real_bloch(H: np.ndarray, basis: OperatorBasis, what: str):
    dev = np.abs(H - H.conj().T).max()
    if dev > 1e-12:
        raise ValueError(f"{what} is not Hermitian: max deviation {dev:.3e}")
    dec = decompose(H, basis)
    return dec.scalar.real, dec.vec.real


def _dependent_subset(images: np.ndarray, labels, tol: float = 1e-10):
    """Labels of channels lying in the span of the other channels."""
    bad = []
    s = images.shape[0]
    scale = np.linalg.norm(images, axis=1)
    for j in range(s):
        if scale[j] <= tol:
            bad.append(labels[j])
            continue
        others = np.delete(images, j, axis=0)
        if others.shape[0] == 0:
            continue
        coef, *_ = np.linalg.lstsq(others.T, images[j], rcond=None)
        if np.linalg.norm(images[j] - others.T @ coef) <= tol * scale[j]:
            bad.append(labels[j])
    return bad


def compile_hamiltonian(spec: HamiltonianSpec, basis: OperatorBasis, *,
                        weights=None) -> HamiltonianModel:
    """Project a system spec onto the basis and validate it.

    Channels must be linearly independent (as Bloch vectors including the
    scalar part); the error message lists the dependent subset.  Weights
    default to the squared generator Bloch-norms; an override must be
    positive and match the channel count.
    """
    if basis.dim != spec.dim:
        raise ValueError(f"basis dimension {basis.dim} does not match spec dimension {spec.dim}")
    h0_free, h_free = _real_bloch(spec.free_operator(), basis, "free Hamiltonian")
    ch_h0 = np.zeros(len(spec.channels))
    ch_h = np.zeros((len(spec.channels), basis.n_ops))
    for j, (ch, H) in enumerate(zip(spec.channels, spec.channel_operators())):
        ch_h0[j], ch_h[j] = _real_bloch(H, basis, f"channel {ch.label!r} generator")
    stacked = np.concatenate([ch_h0[:, None], ch_h], axis=1)
    sv_min = np.linalg.svd(stacked, compute_uv=False).min()
    if sv_min <= 1e-10:
        bad = _dependent_subset(stacked, spec.channel_labels)
        raise ValueError(f"control channels are linearly dependent: {bad}")
    if weights is None:
        w = ch_h0 ** 2 + np.einsum("lj,lj->l", ch_h, ch_h)
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (len(spec.channels),):
            raise ValueError(f"weights length {w.shape} does not match {len(spec.channels)} channels")
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be positive and finite")
    for a in (h_free, ch_h0, ch_h, w):
        a.setflags(write=False)
    return HamiltonianModel(dim=spec.dim, h0_free=h0_free, h_free=h_free,
                            channel_h0=ch_h0, channel_h=ch_h, weights=w,
                            labels=spec.channel_labels)


@dataclass(frozen=True)
class GateTarget:
    """Target unitary with its global-phase correction and Bloch data.

    g0 and g are the decomposition of exp(i*phase) * unitary; unitarity
    puts (g0, g) on the unit sphere |g0|**2 + ||g||**2 = 1.
    """

    dim: int
    unitary: np.ndarray
    phase: float
    g0: complex
    g: np.ndarray


def compile_gate_target(U: np.ndarray, phase: float, basis: OperatorBasis) -> GateTarget:
    """Bloch data of the phase-corrected target exp(i*phase)*U."""
    U = np.asarray(U, dtype=np.complex128)
    d = basis.dim
    if U.shape != (d, d):
        raise ValueError(f"gate shape {U.shape} does not match basis dimension {d}")
    dev = np.abs(U.conj().T @ U - np.eye(d)).max()
    if dev > 1e-10:
        raise ValueError(f"gate is not unitary: max deviation of U^dag U from I is {dev:.3e}")
    dec = decompose(np.exp(1j * phase) * U, basis)
    g = dec.vec.copy()
    g.setflags(write=False)
    return GateTarget(dim=d, unitary=U, phase=float(phase), g0=dec.scalar, g=g)


def _cnot() -> np.ndarray:
    U = np.eye(4, dtype=np.complex128)
    U[2:, 2:] = _PAULI["X"]
    return U


def _toffoli() -> np.ndarray:
    U = np.eye(8, dtype=np.complex128)
    U[6:, 6:] = _PAULI["X"]
    return U


# name -> (unitary, recommended phase correction); phases make
# det(exp(i*phase) * U) = 1 so targets are reachable under traceless
# Hamiltonians.
PRESET_GATES = {
    "NOT": (_PAULI["X"].copy(), math.pi / 2),
    "H": ((_PAULI["X"] + _PAULI["Z"]) / math.sqrt(2), math.pi / 2),
    "S": (np.diag([1.0, 1j]).astype(np.complex128), -math.pi / 4),
    "T": (np.diag([1.0, np.exp(1j * math.pi / 4)]), -math.pi / 8),
    "CNOT": (_cnot(), math.pi / 4),
    "CZ": (np.diag([1.0, 1.0, 1.0, -1.0]).astype(np.complex128), math.pi / 4),
    "TOFFOLI": (_toffoli(), math.pi / 8),
}


def preset_gate(name: str) -> tuple[np.ndarray, float]:
    """Unitary and recommended phase for a named standard gate."""
    key = name.upper()
    if key not in PRESET_GATES:
        raise ValueError(f"unknown gate {name!r}; choose from {sorted(PRESET_GATES)}")
    U, phase = PRESET_GATES[key]
    return U.copy(), phase


@dataclass(frozen=True)
class CostSpec:
    """Cost description of a single stage: running weight and horizon."""

    epsilon: float
    horizon: float
    weight_override: tuple[float, ...] | None = None

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ValueError(f"horizon must be positive, got {self.horizon}")


DEFAULT_EPSILON_SCHEDULE = (5.0, 0.5, 0.05, 0.005)
DEFAULT_TOL = 1e-6


@dataclass(frozen=True)
class ExperimentConfig:
    """Complete description of one synthesis experiment."""

    label: str
    ham: HamiltonianSpec
    gate_unitary: np.ndarray
    gate_phase: float
    horizon: float
    epsilon_schedule: tuple[float, ...] = DEFAULT_EPSILON_SCHEDULE
    weights: tuple[float, ...] | None = None
    mesh: int = 100
    tol: float = DEFAULT_TOL
    max_nodes: int | None = None

    def __post_init__(self):
        sched = tuple(float(e) for e in self.epsilon_schedule)
        if not sched:
            raise ConfigError("cost.epsilon_schedule: must be non-empty")
        if any(e <= 0 or not math.isfinite(e) for e in sched):
            raise ConfigError("cost.epsilon_schedule: entries must be positive and finite")
        if any(b >= a for a, b in zip(sched, sched[1:])):
            raise ConfigError("cost.epsilon_schedule: must be strictly decreasing")
        object.__setattr__(self, "epsilon_schedule", sched)
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ConfigError(f"cost.horizon: must be positive, got {self.horizon}")
        if self.mesh < 2:
            raise ConfigError(f"solver.mesh: need at least 2 nodes, got {self.mesh}")
        if not (self.tol > 0):
            raise ConfigError(f"solver.tol: must be positive, got {self.tol}")
        if self.max_nodes is not None and self.max_nodes < self.mesh:
            raise ConfigError("solver.max_nodes: must be >= solver.mesh")

    def cost_specs(self) -> list[CostSpec]:
        return [CostSpec(eps, self.horizon, self.weights) for eps in self.epsilon_schedule]


def _one_qubit_config(label: str, gate: str, horizon: float) -> ExperimentConfig:
    spec = HamiltonianSpec(
        n_qubits=1,
        free_terms=(PauliTerm("Z", 1.0), PauliTerm("Y", 1.0)),
        channels=(ControlChannel("x", terms=(PauliTerm("X", 1.0),)),),
    )
    U, phase = preset_gate(gate)
    return ExperimentConfig(label=label, ham=spec, gate_unitary=U, gate_phase=phase,
                            horizon=horizon, mesh=500)


def _two_qubit_config(label: str, gate: str, *, omega1, omega2, alpha, beta1, beta2,
                      horizon) -> ExperimentConfig:
    spec = HamiltonianSpec(
        n_qubits=2,
        free_terms=(
            PauliTerm("ZI", omega1 / 2), PauliTerm("IZ", omega2 / 2),
            PauliTerm("IY", alpha),
            PauliTerm("YY", beta1), PauliTerm("ZZ", beta2),
        ),
        channels=(
            ControlChannel("x1", terms=(PauliTerm("XI", 1.0),)),
            ControlChannel("y1", terms=(PauliTerm("YI", 1.0),)),
            ControlChannel("x2", terms=(PauliTerm("IX", 1.0),)),
        ),
    )
    U, phase = preset_gate(gate)
    return ExperimentConfig(label=label, ham=spec, gate_unitary=U, gate_phase=phase,
                            horizon=horizon, mesh=250)


def _toffoli_config() -> ExperimentConfig:
    omega = (1.0, 2.0, 3.0)
    spec = HamiltonianSpec(
        n_qubits=3,
        free_terms=(
            PauliTerm("ZII", omega[0] / 2), PauliTerm("IZI", omega[1] / 2),
            PauliTerm("IIZ", omega[2] / 2),
            PauliTerm("YYI", 1.0), PauliTerm("ZZI", 3.0),
            PauliTerm("IYY", 5.0), PauliTerm("IZZ", 1.5),
        ),
        channels=(
            ControlChannel("x1", terms=(PauliTerm("XII", 1.0),)),
            ControlChannel("x2", terms=(PauliTerm("IXI", 1.0),)),
            ControlChannel("y1", terms=(PauliTerm("YII", 1.0),)),
            ControlChannel("y3", terms=(PauliTerm("IIY", 1.0),)),
        ),
    )
    U, phase = preset_gate("TOFFOLI")
    # tol is looser than the global default: at 1e-6 the defect criterion
    # drives the three-qubit mesh past 1500 nodes on this horizon, while
    # 5e-6 keeps refinement within the documented growth bound and is tight
    # enough that every continuation stage reconstructs its propagator to
    # unitarity well inside 1e-6
    return ExperimentConfig(label="toffoli", ham=spec, gate_unitary=U, gate_phase=phase,
                            horizon=7.44, mesh=100, tol=5e-6)


# The uncontrolled local term for the CNOT system is not pinned by the
# reference parameter set; alpha = 1 matches the other experiments and is
# the documented default.
PRESET_EXPERIMENTS = ("not", "h", "s", "t", "cnot", "cz", "toffoli")


def preset_experiment(name: str) -> ExperimentConfig:
    """Ready-made experiment configuration for a named gate."""
    key = name.lower()
    if key == "not":
        return _one_qubit_config("not", "NOT", 1.0)
    if key == "h":
        return _one_qubit_config("h", "H", 1.0)
    if key == "s":
        return _one_qubit_config("s", "S", 0.6)
    if key == "t":
        return _one_qubit_config("t", "T", 0.3)
    if key == "cnot":
        return _two_qubit_config("cnot", "CNOT", omega1=3.0, omega2=4.0, alpha=1.0,
                                 beta1=1.25, beta2=1.25, horizon=4.75)
    if key == "cz":
        return _two_qubit_config("cz", "CZ", omega1=2.0, omega2=2.0, alpha=1.0,
                                 beta1=0.5, beta2=0.75, horizon=9.8)
    if key == "toffoli":
        return _toffoli_config()
    raise ValueError(f"unknown preset {name!r}; choose from {PRESET_EXPERIMENTS}")


# ---------------------------------------------------------------------------
# JSON serialization of experiment configs
# ---------------------------------------------------------------------------

def _matrix_to_json(M: np.ndarray) -> dict:
    M = np.asarray(M, dtype=np.complex128)
    return {"re": M.real.tolist(), "im": M.imag.tolist()}


def _matrix_from_json(obj, where: str) -> np.ndarray:
    try:
        return np.asarray(obj["re"], dtype=float) + 1j * np.asarray(obj["im"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: expected {{re: [[..]], im: [[..]]}}, got {obj!r}") from exc


def _terms_to_json(terms) -> list:
    return [{"pauli": t.pauli, "coeff": t.coeff} for t in terms]


def _terms_from_json(objs, where: str) -> tuple[PauliTerm, ...]:
    out = []
    for i, obj in enumerate(objs):
        try:
            out.append(PauliTerm(obj["pauli"], float(obj["coeff"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{where}[{i}]: {exc}") from exc
    return tuple(out)


def config_to_dict(config: ExperimentConfig) -> dict:
    ham: dict = {"n_qubits": config.ham.n_qubits}
    if config.ham.free_terms is not None:
        ham["free_terms"] = _terms_to_json(config.ham.free_terms)
    elif config.ham.free_matrix is not None:
        ham["free_matrix"] = _matrix_to_json(config.ham.free_matrix)
    ham["channels"] = []
    for ch in config.ham.channels:
        entry: dict = {"label": ch.label}
        if ch.terms is not None:
            entry["terms"] = _terms_to_json(ch.terms)
        else:
            entry["matrix"] = _matrix_to_json(ch.matrix)
        ham["channels"].append(entry)
    return {
        "label": config.label,
        "hamiltonian": ham,
        "gate": {"matrix": _matrix_to_json(config.gate_unitary), "phase": config.gate_phase},
        "cost": {
            "epsilon_schedule": list(config.epsilon_schedule),
            "horizon": config.horizon,
            "weights": list(config.weights) if config.weights is not None else None,
        },
        "solver": {"mesh": config.mesh, "tol": config.tol, "max_nodes": config.max_nodes},
    }


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"config root: expected an object, got {type(data).__name__}")
    try:
        ham_obj = data["hamiltonian"]
        n_qubits = int(ham_obj["n_qubits"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"hamiltonian.n_qubits: missing or invalid ({exc})") from exc
    free_terms = free_matrix = None
    if "free_terms" in ham_obj:
        free_terms = _terms_from_json(ham_obj["free_terms"], "hamiltonian.free_terms")
    elif "free_matrix" in ham_obj:
        free_matrix = _matrix_from_json(ham_obj["free_matrix"], "hamiltonian.free_matrix")
    channels = []
    for i, entry in enumerate(ham_obj.get("channels", [])):
        where = f"hamiltonian.channels[{i}]"
        label = entry.get("label", f"ch{i}")
        try:
            if "terms" in entry:
                channels.append(ControlChannel(label, terms=_terms_from_json(entry["terms"], where)))
            elif "matrix" in entry:
                channels.append(ControlChannel(label, matrix=_matrix_from_json(entry["matrix"], where)))
            else:
                raise ConfigError(f"{where}: needs terms or matrix")
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
    try:
        ham = HamiltonianSpec(n_qubits=n_qubits, free_terms=free_terms,
                              free_matrix=free_matrix, channels=tuple(channels))
    except ValueError as exc:
        raise ConfigError(f"hamiltonian: {exc}") from exc

    gate_obj = data.get("gate", {})
    if "preset" in gate_obj:
        try:
            U, phase = preset_gate(gate_obj["preset"])
        except ValueError as exc:
            raise ConfigError(f"gate.preset: {exc}") from exc
        phase = float(gate_obj.get("phase", phase))
    elif "matrix" in gate_obj:
        U = _matrix_from_json(gate_obj["matrix"], "gate.matrix")
        if "phase" not in gate_obj:
            raise ConfigError("gate.phase: required with gate.matrix")
        phase = float(gate_obj["phase"])
    else:
        raise ConfigError("gate: needs preset or matrix")

    cost = data.get("cost", {})
    if "horizon" not in cost:
        raise ConfigError("cost.horizon: required")
    solver = data.get("solver", {})
    weights = cost.get("weights")
    try:
        return ExperimentConfig(
            label=str(data.get("label", "experiment")),
            ham=ham,
            gate_unitary=U,
            gate_phase=phase,
            horizon=float(cost["horizon"]),
            epsilon_schedule=tuple(cost.get("epsilon_schedule", DEFAULT_EPSILON_SCHEDULE)),
            weights=tuple(weights) if weights is not None else None,
            mesh=int(solver.get("mesh", 100)),
            tol=float(solver.get("tol", DEFAULT_TOL)),
            max_nodes=solver.get("max_nodes"),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)


def save_config(config: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config_to_dict(config), indent=2))
    return path
