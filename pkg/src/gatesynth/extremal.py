"""Optimality system for gate synthesis: feedback, flow, boundary data.

Eliminating the controls through the linear stationarity condition turns
the first-order optimality conditions into a two-point boundary value
problem for the Bloch state w = (u0, u) and a costate q = (p0, p) that
obeys the same unitary-type flow.  This module builds that system: the
closed-form feedback nu(w, q), the coupled right-hand side and its
analytic Jacobian in a fixed real encoding, boundary residuals, and the
control Hamiltonian whose conservation serves as a solution check.  It
also provides the discrete cost gradient used to validate the costate
convention against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .basis import StructureConstants
from .dynamics import ControlTrajectory, channel_generators, terminal_cost
from .model import GateTarget, HamiltonianModel

__all__ = [
    "ExtremalState",
    "RealEncoding",
    "PontryaginValue",
    "SingularFeedbackError",
    "ExtremalSystem",
    "control_feedback",
    "extremal_rhs",
    "boundary_residual",
    "pontryagin_hamiltonian",
    "fd_jacobian",
    "total_cost",
    "total_cost_gradient",
]


class SingularFeedbackError(ValueError):
    """Feedback gain undefined: epsilon or a control weight is not positive."""


@dataclass(frozen=True)
class ExtremalState:
    """State and costate Bloch components at one time."""

    u0: complex
    u: np.ndarray
    p0: complex
    p: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.complex128)
        p = np.asarray(self.p, dtype=np.complex128)
        if u.shape != p.shape or u.ndim != 1:
            raise ValueError(f"u and p must be vectors of equal length, got {u.shape} and {p.shape}")
        if not (np.isfinite(u).all() and np.isfinite(p).all()
                and np.isfinite([self.u0, self.p0]).all()):
            raise ValueError("extremal state entries must be finite")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "p", p)


class RealEncoding:
    """Bijection between ExtremalState and a real vector of length 4d**2.

    Order: [Re u0, Im u0, Re u_1..Re u_n, Im u_1..Im u_n,
            Re p0, Im p0, Re p_1..Re p_n, Im p_1..Im p_n], n = d**2 - 1.
    """

    def __init__(self, dim: int):
        if dim < 2:
            raise ValueError("dimension must be at least 2")
        self.dim = dim
        self.n = dim * dim - 1
        self.size = 4 * dim * dim

    def pack(self, state: ExtremalState) -> np.ndarray:
        n = self.n
        if state.u.shape != (n,):
            raise ValueError(f"state length {state.u.shape} does not match dimension {self.dim}")
        y = np.empty(self.size)
        y[0], y[1] = state.u0.real, state.u0.imag
        y[2:n + 2] = state.u.real
        y[n + 2:2 * n + 2] = state.u.imag
        off = 2 * n + 2
        y[off], y[off + 1] = state.p0.real, state.p0.imag
        y[off + 2:off + n + 2] = state.p.real
        y[off + n + 2:] = state.p.imag
        return y

    def unpack(self, y: np.ndarray) -> ExtremalState:
        w, q = self.split(np.asarray(y, dtype=float))
        return ExtremalState(u0=w[0], u=w[1:], p0=q[0], p=q[1:])

    def split(self, Y: np.ndarray):
        """Real array(s) (size,) or (size, m) -> complex (w, q) stacks."""
        Y = np.asarray(Y, dtype=float)
        if Y.shape[0] != self.size:
            raise ValueError(f"encoding length {Y.shape[0]} does not match {self.size}")
        n = self.n
        off = 2 * n + 2
        w = np.empty((n + 1,) + Y.shape[1:], dtype=np.complex128)
        q = np.empty_like(w)
        w[0] = Y[0] + 1j * Y[1]
        w[1:] = Y[2:n + 2] + 1j * Y[n + 2:off]
        q[0] = Y[off] + 1j * Y[off + 1]
        q[1:] = Y[off + 2:off + n + 2] + 1j * Y[off + n + 2:]
        return w, q

    def join(self, w: np.ndarray, q: np.ndarray) -> np.ndarray:
        """Inverse of split for stacks of complex (w, q)."""
        n = self.n
        off = 2 * n + 2
        Y = np.empty((self.size,) + w.shape[1:])
        Y[0], Y[1] = w[0].real, w[0].imag
        Y[2:n + 2] = w[1:].real
        Y[n + 2:off] = w[1:].imag
        Y[off], Y[off + 1] = q[0].real, q[0].imag
        Y[off + 2:off + n + 2] = q[1:].real
        Y[off + n + 2:] = q[1:].imag
        return Y

    def permutation_from_blocks(self) -> np.ndarray:
        """Index array mapping block order [Re w, Im w, Re q, Im q] to this layout."""
        n = self.n
        half = np.concatenate(([0], [n + 1], np.arange(1, n + 1),
                               np.arange(n + 2, 2 * n + 2)))
        return np.concatenate([half, half + 2 * (n + 1)])


def _check_gain(epsilon: float, weights: np.ndarray):
    if epsilon <= 0:
        raise SingularFeedbackError(f"epsilon must be positive, got {epsilon}")
    if np.any(weights <= 0):
        raise SingularFeedbackError("control weights must all be positive")


class ExtremalSystem:
    """Precompiled optimality system for one model, target and epsilon.

    Supplies vectorized callables (states as columns) for a collocation
    solver: right-hand side, analytic Jacobian, boundary residuals and
    their Jacobians, plus diagnostics evaluated along trajectories.
    """

    def __init__(self, model: HamiltonianModel, target: GateTarget,
                 epsilon: float, sc: StructureConstants, *,
                 conjugate_costate: bool = False):
        _check_gain(epsilon, model.weights)
        if target.dim != model.dim:
            raise ValueError(f"target dimension {target.dim} != model dimension {model.dim}")
        self.model = model
        self.target = target
        self.epsilon = float(epsilon)
        self.sc = sc
        self.encoding = RealEncoding(model.dim)
        self.A_free, self.A_ch = channel_generators(model, sc)
        self.weights = model.weights
        g0, g = target.g0, target.g.copy()
        if conjugate_costate:
            g0, g = np.conj(g0), np.conj(g)
        self.conjugate_costate = conjugate_costate
        # terminal costate value q(T) = -(g0, g)
        self._qT = -np.concatenate(([g0], g))
        self._perm = self.encoding.permutation_from_blocks()

    @property
    def size(self) -> int:
        return self.encoding.size

    # -- core evaluations ------------------------------------------------

    def _feedback_parts(self, W, Q):
        """nu, X_l = A_l w, Y_l = A_l q for column stacks W, Q."""
        X = np.einsum("lab,b...->la...", self.A_ch, W)
        Y = np.einsum("lab,b...->la...", self.A_ch, Q)
        b = np.einsum("a...,la...->l...", Q.conj(), X).imag
        nu = -b / (self.epsilon * self.weights.reshape((-1,) + (1,) * (W.ndim - 1)))
        return nu, X, Y

    def feedback(self, Y: np.ndarray) -> np.ndarray:
        """Controls (s,) or (s, m) for encoded states."""
        W, Q = self.encoding.split(Y)
        nu, _, _ = self._feedback_parts(W, Q)
        return nu

    def rhs(self, x, Y: np.ndarray) -> np.ndarray:
        """Apply the closed-loop flow; autonomous (x is ignored)."""
        single = np.ndim(Y) == 1
        Ycols = Y.reshape(self.size, -1) if single else Y
        W, Q = self.encoding.split(Ycols)
        nu, X, Yq = self._feedback_parts(W, Q)
        hW = self.A_free @ W + np.einsum("l...,la...->a...", nu, X)
        hQ = self.A_free @ Q + np.einsum("l...,la...->a...", nu, Yq)
        out = self.encoding.join(-1j * hW, -1j * hQ)
        return out[:, 0] if single else out

    def jacobian(self, x, Y: np.ndarray) -> np.ndarray:
        """d(rhs)/dY as (m, size, size); includes the feedback chain rule."""
        single = np.ndim(Y) == 1
        Ycols = Y.reshape(self.size, -1) if single else Y
        W, Q = self.encoding.split(Ycols)
        nu, X, Yq = self._feedback_parts(W, Q)
        m = Ycols.shape[1]
        nw = self.A_free.shape[0]
        A = self.A_free[None, :, :] + np.einsum("lm,lab->mab", nu, self.A_ch)
        AR, AI = A.real, A.imag
        N = self.size
        J = np.zeros((m, N, N))
        for blk in (0, 2 * nw):
            J[:, blk:blk + nw, blk:blk + nw] = AI
            J[:, blk:blk + nw, blk + nw:blk + 2 * nw] = AR
            J[:, blk + nw:blk + 2 * nw, blk:blk + nw] = -AR
            J[:, blk + nw:blk + 2 * nw, blk + nw:blk + 2 * nw] = AI
        # feedback coupling: rank-one update per channel,
        # d(flow)/d(nu_l) times d(nu_l)/dY
        R = np.concatenate([X.imag, -X.real, Yq.imag, -Yq.real], axis=1)
        gain = (self.epsilon * self.weights)[:, None, None]
        S = np.concatenate([Yq.imag, -Yq.real, -X.imag, X.real], axis=1) / gain
        J += np.einsum("lam,lbm->mab", R, S)
        perm = self._perm
        # advanced indexing yields a transposed buffer; matmul downstream
        # needs C-contiguous batches to stay on the fast BLAS path
        J = np.ascontiguousarray(J[:, perm[:, None], perm[None, :]])
        return J[0] if single else J

    # -- boundary data ---------------------------------------------------

    def boundary(self, ya: np.ndarray, yb: np.ndarray) -> np.ndarray:
        """Residuals: u-slots hold u(0) - identity, p-slots hold p(T) - q_T."""
        enc = self.encoding
        n = enc.n
        res = np.empty(enc.size)
        res[:2 * n + 2] = ya[:2 * n + 2]
        res[0] -= 1.0
        qT = self._qT
        off = 2 * n + 2
        res[off] = yb[off] - qT[0].real
        res[off + 1] = yb[off + 1] - qT[0].imag
        res[off + 2:off + n + 2] = yb[off + 2:off + n + 2] - qT[1:].real
        res[off + n + 2:] = yb[off + n + 2:] - qT[1:].imag
        return res

    def boundary_jacobian(self, ya: np.ndarray, yb: np.ndarray):
        N = self.size
        half = N // 2
        Ja = np.zeros((N, N))
        Jb = np.zeros((N, N))
        Ja[:half, :half] = np.eye(half)
        Jb[half:, half:] = np.eye(half)
        return Ja, Jb

    # -- diagnostics -----------------------------------------------------

    def hamiltonian_values(self, Y: np.ndarray) -> np.ndarray:
        """Control Hamiltonian at each column; constant along extremals."""
        W, Q = self.encoding.split(Y)
        nu, X, _ = self._feedback_parts(W, Q)
        A = self.A_free[None, :, :] + np.einsum("lm,lab->mab", nu, self.A_ch)
        AW = np.einsum("mab,bm->am", A, W)
        coupling = 2.0 * np.einsum("am,am->m", Q.conj(), AW).imag
        running = self.epsilon * np.einsum("l,lm->m", self.weights, nu ** 2)
        return running + coupling

    def stationarity_values(self, Y: np.ndarray, nu: np.ndarray) -> np.ndarray:
        """Residual eps*w_l*nu_l + Im<q, A_l w> per channel and column."""
        W, Q = self.encoding.split(Y)
        X = np.einsum("lab,b...->la...", self.A_ch, W)
        b = np.einsum("a...,la...->l...", Q.conj(), X).imag
        return self.epsilon * self.weights.reshape((-1,) + (1,) * (b.ndim - 1)) * nu + b

    def costate_norms(self, Y: np.ndarray) -> np.ndarray:
        _, Q = self.encoding.split(Y)
        return np.sqrt(np.einsum("a...,a...->...", Q.conj(), Q).real)


# -- module-level operations on single states ---------------------------


def control_feedback(state: ExtremalState, model: HamiltonianModel,
                     epsilon: float, sc: StructureConstants) -> np.ndarray:
    """Unique root of the stationarity condition, one value per channel.

    nu_l = -(1/(eps*w_l)) * Im<q, A_l w> where A_l is the Bloch generator
    of channel l; expanding the inner product gives the h0_l, h_l and
    structure-constant terms of the closed-form feedback law.
    """
    _check_gain(epsilon, model.weights)
    A_free, A_ch = channel_generators(model, sc)
    w = np.concatenate(([state.u0], state.u))
    q = np.concatenate(([state.p0], state.p))
    b = np.einsum("a,lab,b->l", q.conj(), A_ch, w).imag
    return -b / (epsilon * model.weights)


def extremal_rhs(t: float, y: np.ndarray, model: HamiltonianModel,
                 epsilon: float, sc: StructureConstants,
                 target: GateTarget | None = None) -> np.ndarray:
    """Closed-loop derivative of the encoded state-costate pair.

    Decodes y, computes the feedback, drives both (u0, u) and (p0, p)
    with the same Bloch flow, re-encodes.  Autonomous in t.  The target
    only fixes boundary data, so any target of the right dimension works
    here; passing one is optional.
    """
    if target is None:
        d = model.dim
        target = GateTarget(dim=d, unitary=np.eye(d, dtype=complex), phase=0.0,
                            g0=1.0 + 0.0j, g=np.zeros(d * d - 1, dtype=complex))
    system = ExtremalSystem(model, target, epsilon, sc)
    return system.rhs(t, np.asarray(y, dtype=float))


def boundary_residual(y_at_0: np.ndarray, y_at_T: np.ndarray,
                      target: GateTarget, *,
                      conjugate_costate: bool = False) -> np.ndarray:
    """Two-point residual in the real encoding.

    u-block slots: u0(0) - 1 and u(0); p-block slots: p0(T) + g0 and
    p(T) + g.  ``conjugate_costate`` switches the terminal condition to
    the conjugated target components; synthesis that stalls near
    terminal cost 1 is the symptom that would motivate trying it.
    """
    d = target.dim
    n = d * d - 1
    y0 = np.asarray(y_at_0, dtype=float)
    yT = np.asarray(y_at_T, dtype=float)
    if y0.shape != (4 * d * d,) or yT.shape != (4 * d * d,):
        raise ValueError(f"encodings must have length {4 * d * d}")
    g0, g = target.g0, target.g
    if conjugate_costate:
        g0, g = np.conj(g0), np.conj(g)
    res = np.empty(4 * d * d)
    res[:2 * n + 2] = y0[:2 * n + 2]
    res[0] -= 1.0
    off = 2 * n + 2
    res[off] = yT[off] + g0.real
    res[off + 1] = yT[off + 1] + g0.imag
    res[off + 2:off + n + 2] = yT[off + 2:off + n + 2] + g.real
    res[off + n + 2:] = yT[off + n + 2:] + g.imag
    return res


@dataclass(frozen=True)
class PontryaginValue:
    """Control Hamiltonian with its additive breakdown."""

    value: float
    running_term: float         # eps * sum_l w_l nu_l**2
    scalar_term: float          # 2 Im(conj(p0) (h0 u0 + h.u))
    vector_term: float          # 2 Im(conj(p) . (h0 u + u0 h))
    mixing_term: float          # sqrt(2d) Im(sum z_kmj h_k u_m conj(p_j))


def pontryagin_hamiltonian(state: ExtremalState, nu: np.ndarray,
                           model: HamiltonianModel, epsilon: float,
                           sc: StructureConstants) -> PontryaginValue:
    """Evaluate the control Hamiltonian term by term at given controls."""
    nu = np.asarray(nu, dtype=float)
    if nu.shape != (model.n_channels,):
        raise ValueError(f"expected {model.n_channels} control values, got {nu.shape}")
    h0 = model.h0_free + float(nu @ model.channel_h0)
    h = model.h_free + nu @ model.channel_h
    u0, u, p0, p = state.u0, state.u, state.p0, state.p
    running = epsilon * float(model.weights @ nu ** 2)
    scalar = 2.0 * (np.conj(p0) * (h0 * u0 + h @ u)).imag
    vector = 2.0 * np.sum(p.conj() * (h0 * u + u0 * h)).imag
    z = sc.dense_g + 1j * sc.dense_f
    mixing = math.sqrt(2.0 * sc.dim) * np.einsum(
        "kmj,k,m,j->", z, h.astype(complex), u, p.conj()).imag
    return PontryaginValue(value=running + scalar + vector + mixing,
                           running_term=running, scalar_term=float(scalar),
                           vector_term=float(vector), mixing_term=float(mixing))


def fd_jacobian(fun, y: np.ndarray, *, step_scale: float = 1e-7) -> np.ndarray:
    """Column-wise forward-difference Jacobian of fun at y."""
    y = np.asarray(y, dtype=float)
    f0 = np.asarray(fun(y))
    J = np.empty((len(f0), len(y)))
    for j in range(len(y)):
        step = step_scale * (1.0 + abs(y[j]))
        yp = y.copy()
        yp[j] += step
        J[:, j] = (np.asarray(fun(yp)) - f0) / step
    return J


# -- discrete cost and its adjoint gradient ------------------------------


def _interval_propagators(system: ExtremalSystem, controls: ControlTrajectory):
    """Eigendecompositions of the constant generator on each interval."""
    if controls.kind != "pconst":
        raise ValueError("cost evaluation requires piecewise-constant controls")
    decomps = []
    for i in range(len(controls.times) - 1):
        A = system.A_free + np.tensordot(controls.values[:, i], system.A_ch, axes=1)
        lam, V = np.linalg.eigh(A)
        decomps.append((lam, V))
    return decomps


def _step(decomp, tau: float, vec: np.ndarray) -> np.ndarray:
    lam, V = decomp
    return (V * np.exp(-1j * lam * tau)) @ (V.conj().T @ vec)


def total_cost(model: HamiltonianModel, target: GateTarget,
               controls: ControlTrajectory, epsilon: float,
               sc: StructureConstants) -> float:
    """Terminal cost plus (eps/2) integral of the weighted control power.

    Piecewise-constant controls make the flow exactly solvable interval
    by interval, so the value carries no time-discretization error.
    """
    system = ExtremalSystem(model, target, epsilon, sc)
    decomps = _interval_propagators(system, controls)
    w = np.zeros(model.dim ** 2, dtype=np.complex128)
    w[0] = 1.0
    dt = np.diff(controls.times)
    for i, decomp in enumerate(decomps):
        w = _step(decomp, dt[i], w)
    running = 0.5 * epsilon * float(
        (model.weights @ controls.values ** 2) @ dt)
    return terminal_cost(w[0], w[1:], target) + running


def total_cost_gradient(model: HamiltonianModel, target: GateTarget,
                        controls: ControlTrajectory, epsilon: float,
                        sc: StructureConstants, *, panels: int = 8) -> np.ndarray:
    """Gradient of total_cost in the control values, shape (s, intervals).

    Forward sweep for the state, backward sweep for the costate (same
    flow, terminal value -(g0, g)), then per-interval Simpson quadrature
    of eps*w_l*nu_l + Im<q, A_l w>.  The terminal-cost derivative comes
    out right because the flow preserves the Bloch sphere, where the
    cost is affine with gradient -(g0, g).
    """
    system = ExtremalSystem(model, target, epsilon, sc)
    decomps = _interval_propagators(system, controls)
    dt = np.diff(controls.times)
    n_int = len(dt)
    w_nodes = [np.concatenate(([1.0 + 0.0j], np.zeros(model.dim ** 2 - 1, complex)))]
    for i, decomp in enumerate(decomps):
        w_nodes.append(_step(decomp, dt[i], w_nodes[-1]))
    q_nodes = [None] * (n_int + 1)
    q_nodes[-1] = system._qT.copy()
    for i in range(n_int - 1, -1, -1):
        q_nodes[i] = _step(decomps[i], -dt[i], q_nodes[i + 1])

    if panels % 2 or panels < 2:
        raise ValueError("panels must be even and at least 2")
    simpson = np.ones(panels + 1)
    simpson[1:-1:2] = 4.0
    simpson[2:-1:2] = 2.0
    grad = np.empty((model.n_channels, n_int))
    for i in range(n_int):
        taus = np.linspace(0.0, dt[i], panels + 1)
        b = np.empty((model.n_channels, panels + 1))
        for j, tau in enumerate(taus):
            w = _step(decomps[i], tau, w_nodes[i])
            q = _step(decomps[i], tau, q_nodes[i])
            b[:, j] = np.einsum("a,lab,b->l", q.conj(), system.A_ch, w).imag
        integral = b @ simpson * (dt[i] / (3.0 * panels))
        grad[:, i] = epsilon * model.weights * controls.values[:, i] * dt[i] + integral
    return grad
