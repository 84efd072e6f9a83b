"""Two-point boundary value solver: collocation with adaptive refinement.

Generic over the problem; nothing here knows about quantum systems.
Discretization is the 3-stage Lobatto scheme (order 4): on each mesh
interval the C1 cubic through the nodal values and slopes satisfies the
differential equation at both endpoints and the interval midpoint.  The
nonlinear collocation system is solved by damped Newton; the Newton
matrix is almost block diagonal (one [L R] block row per interval plus
one boundary row coupling the first and last nodes) and is eliminated
block column by block column with partial pivoting, so memory stays a
few n-by-n blocks per node no matter how fine the mesh.  Converged
meshes are then judged by the interpolant's normalized defect at
Lobatto sample points and refined where the defect exceeds the
tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import CubicHermiteSpline
from scipy.linalg import get_lapack_funcs, solve_triangular

__all__ = [
    "BvpProblem",
    "BvpSolution",
    "SolverOptions",
    "solve_bvp",
    "evaluate",
    "estimate_residual",
]

STATUS_CONVERGED = "converged"
STATUS_MAX_NODES = "max-nodes-exceeded"
STATUS_NEWTON_FAILED = "newton-failed"

# Lobatto points and weights on [0, 1]; the odd-indexed points are not
# collocation points, so the defect there measures genuine error
_LOBATTO_TAU = np.array([0.0,
                         0.5 - 0.5 * math.sqrt(3.0 / 7.0),
                         0.5,
                         0.5 + 0.5 * math.sqrt(3.0 / 7.0),
                         1.0])
_LOBATTO_W = np.array([1.0 / 20.0, 49.0 / 180.0, 16.0 / 45.0,
                       49.0 / 180.0, 1.0 / 20.0])


@dataclass
class BvpProblem:
    """First-order system y' = rhs(t, y) on [a, b] with bc(y(a), y(b)) = 0.

    ``rhs`` must be vectorized: given t of shape (m,) and states as
    columns (n, m) it returns the derivatives (n, m).  ``bc`` maps two
    state vectors to n residuals.  Jacobian callbacks are optional;
    ``rhs_jac(t, Y)`` returns (m, n, n) and ``bc_jac(ya, yb)`` a pair of
    (n, n) matrices.  Missing Jacobians fall back to forward
    differences with step 1e-7 * (1 + |y|).
    """

    n: int
    rhs: Callable
    bc: Callable
    a: float
    b: float
    rhs_jac: Optional[Callable] = None
    bc_jac: Optional[Callable] = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("state dimension must be at least 1")
        if not self.a < self.b:
            raise ValueError(f"need a < b, got [{self.a}, {self.b}]")


@dataclass
class SolverOptions:
    tol: float = 1e-6
    max_nodes: Optional[int] = None      # default 20x the initial mesh
    max_newton_iter: int = 12
    damping_factor: float = 0.5
    min_damping: float = 1e-10
    newton_tol: Optional[float] = None   # rms; default scales with tol and mesh
    stall_patience: Optional[int] = None  # consecutive slow iterations before giving up
    verbose: bool = False
    log: Optional[Callable[[str], None]] = None

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_newton_iter < 1:
            raise ValueError("need at least one Newton iteration")

    def emit(self, message: str):
        if self.log is not None:
            self.log(message)
        elif self.verbose:
            print(message)


@dataclass
class BvpSolution:
    """Mesh, nodal states, C1 interpolant and solve diagnostics."""

    mesh: np.ndarray                 # (m,)
    states: np.ndarray               # (n, m)
    interpolant: CubicHermiteSpline
    residuals: np.ndarray            # (m - 1,) normalized defect per interval
    newton_iterations: int
    status: str
    message: str

    @property
    def max_residual(self) -> float:
        return float(self.residuals.max()) if len(self.residuals) else 0.0


def _fd_rhs_jacobian(problem: BvpProblem, x: np.ndarray, Y: np.ndarray,
                     F: np.ndarray) -> np.ndarray:
    n, m = Y.shape
    J = np.empty((m, n, n))
    for j in range(n):
        step = 1e-7 * (1.0 + np.abs(Y[j]))
        Yp = Y.copy()
        Yp[j] += step
        J[:, :, j] = ((problem.rhs(x, Yp) - F) / step).T
    return J


def _fd_bc_jacobian(problem: BvpProblem, ya: np.ndarray, yb: np.ndarray):
    n = problem.n
    r0 = np.asarray(problem.bc(ya, yb), dtype=float)
    Ja = np.empty((n, n))
    Jb = np.empty((n, n))
    for j in range(n):
        step = 1e-7 * (1.0 + abs(ya[j]))
        yp = ya.copy()
        yp[j] += step
        Ja[:, j] = (np.asarray(problem.bc(yp, yb)) - r0) / step
        step = 1e-7 * (1.0 + abs(yb[j]))
        yp = yb.copy()
        yp[j] += step
        Jb[:, j] = (np.asarray(problem.bc(ya, yp)) - r0) / step
    return Ja, Jb


def _collocation_residual(problem: BvpProblem, x, Y):
    """Nodal slopes, midpoint states/slopes, stacked residual vector."""
    h = np.diff(x)
    F = problem.rhs(x, Y)
    Ymid = 0.5 * (Y[:, :-1] + Y[:, 1:]) - (h / 8.0) * (F[:, 1:] - F[:, :-1])
    Fmid = problem.rhs(x[:-1] + h / 2.0, Ymid)
    Phi = Y[:, 1:] - Y[:, :-1] - (h / 6.0) * (F[:, :-1] + 4.0 * Fmid + F[:, 1:])
    bc = np.asarray(problem.bc(Y[:, 0], Y[:, -1]), dtype=float)
    if bc.shape != (problem.n,):
        raise ValueError(f"boundary function returned {bc.shape}, expected ({problem.n},)")
    vec = np.concatenate([Phi.T.ravel(), bc])
    return F, Ymid, Fmid, vec


def _jacobian_block(problem: BvpProblem, t, Ycols, Fcols):
    if problem.rhs_jac is not None:
        return np.ascontiguousarray(problem.rhs_jac(t, Ycols))
    return _fd_rhs_jacobian(problem, t, Ycols, Fcols)


class SingularJacobianError(RuntimeError):
    """The collocation Jacobian has an exactly singular pivot block."""


def _abd_solve(problem: BvpProblem, x, Y, F, Ymid, Fmid, rhs):
    """Direct solve of the collocation Newton system for one right side.

    The matrix is almost block diagonal: interval i contributes the
    block row [L_i R_i] in columns (i, i+1), and the boundary row
    couples columns 0 and m-1.  Columns are eliminated left to right;
    the panel at column i stacks the interval row over the current
    boundary carry and is LU-factored with partial pivoting, which
    confines fill to one extra n-by-n coupling block per node.  Keeps
    three n-by-n blocks per node for back-substitution, so memory is
    linear in the mesh with a fixed constant (a general sparse
    factorization fills far more on large state dimensions).

    ``rhs`` is the stacked right side (interval-major, boundary rows
    last); returns the solution with one (n,) column per node.
    """
    n, m = Y.shape
    dx = np.diff(x)
    xmid = x[:-1] + dx / 2.0
    if problem.bc_jac is not None:
        Ja, Jb = problem.bc_jac(Y[:, 0], Y[:, -1])
    else:
        Ja, Jb = _fd_bc_jacobian(problem, Y[:, 0], Y[:, -1])
    eye = np.eye(n)
    r = np.asarray(rhs, dtype=float).reshape(m, n)

    C = np.array(Ja, dtype=float)      # boundary-row coupling to column i
    E = np.array(Jb, dtype=float)      # boundary-row coupling to column m-1
    d = r[-1].copy()                   # boundary-row right side

    # per-node factors kept for back-substitution
    U = np.empty((m - 1, n, n))        # upper factor of the pivot panel
    B = np.empty((m - 1, n, n))        # transformed coupling to column i+1
    G = np.empty((max(m - 2, 0), n, n))  # transformed coupling to column m-1
    rt = np.empty((m - 1, n))          # transformed interval right side

    getrf, laswp = get_lapack_funcs(("getrf", "laswp"), (C,))
    A = np.empty((2 * n, n), order="F")
    Z = np.empty((2 * n, 2 * n + 1), order="F")
    chunk = max(16, min(m - 1, 4_194_304 // (n * n)))
    for i0 in range(0, m - 1, chunk):
        i1 = min(i0 + chunk, m - 1)
        Jn = _jacobian_block(problem, x[i0:i1 + 1], Y[:, i0:i1 + 1],
                             F[:, i0:i1 + 1])
        Jm = _jacobian_block(problem, xmid[i0:i1], Ymid[:, i0:i1],
                             Fmid[:, i0:i1])
        h = dx[i0:i1, None, None]
        JL, JR = Jn[:-1], Jn[1:]
        Lb = -eye - (h / 6.0) * (JL + 2.0 * Jm + (h / 2.0) * (Jm @ JL))
        Rb = eye - (h / 6.0) * (JR + 2.0 * Jm - (h / 2.0) * (Jm @ JR))
        for j in range(i1 - i0):
            i = i0 + j
            last = i == m - 2
            A[:n] = Lb[j]
            A[n:] = C
            k = n + 1 if last else 2 * n + 1
            Zv = Z[:, :k]
            Zv[:n, :n] = Rb[j]
            Zv[n:, :n] = E if last else 0.0
            if not last:
                Zv[:n, n:2 * n] = 0.0
                Zv[n:, n:2 * n] = E
            Zv[:n, -1] = r[i]
            Zv[n:, -1] = d
            lu, piv, info = getrf(A, overwrite_a=True)
            if info > 0:
                raise SingularJacobianError(
                    f"zero pivot eliminating node {i} of {m}")
            laswp(Zv, piv, k1=0, k2=n - 1, overwrite_a=1)
            Zv[:n] = solve_triangular(lu[:n], Zv[:n], lower=True,
                                      unit_diagonal=True, check_finite=False)
            Zv[n:] -= lu[n:] @ Zv[:n]
            U[i] = lu[:n]
            B[i] = Zv[:n, :n]
            if not last:
                G[i] = Zv[:n, n:2 * n]
                E = Zv[n:, n:2 * n].copy()
            C = Zv[n:, :n].copy()
            rt[i] = Zv[:n, -1]
            d = Zv[n:, -1].copy()

    try:
        y_last = np.linalg.solve(C, d)
    except np.linalg.LinAlgError as exc:
        raise SingularJacobianError(f"boundary block solve failed: {exc}")
    delta = np.empty((n, m))
    delta[:, m - 1] = y_last
    y_next = y_last
    for i in range(m - 2, -1, -1):
        t = rt[i] - B[i] @ y_next
        if i < m - 2:
            t -= G[i] @ y_last
        y_next = solve_triangular(U[i], t, lower=False, check_finite=False)
        delta[:, i] = y_next
    return delta


def _rms(vec: np.ndarray) -> float:
    return float(np.linalg.norm(vec) / math.sqrt(len(vec)))


def _run_newton(problem: BvpProblem, x, Y, options: SolverOptions):
    """Damped Newton on a fixed mesh; returns (Y, F, converged, iters, message)."""
    n, m = Y.shape
    if options.newton_tol is not None:
        target = options.newton_tol
    else:
        # keep the algebraic leftover well under the defect scale: the
        # midpoint defect of the interpolant is 1.5 * residual / h
        target = max(options.tol * float(np.diff(x).min()) / 30.0, 1e-13)
    F, Ymid, Fmid, vec = _collocation_residual(problem, x, Y)
    rho = _rms(vec)
    iters = 0
    slow = 0
    for _ in range(options.max_newton_iter):
        if rho <= target:
            return Y, F, True, iters, f"rms residual {rho:.3e}"
        try:
            delta = _abd_solve(problem, x, Y, F, Ymid, Fmid, -vec)
        except SingularJacobianError as exc:
            return Y, F, False, iters, f"factorization failed: {exc}"
        lam = 1.0
        while True:
            Ytry = Y + lam * delta
            Ft, Ymt, Fmt, vect = _collocation_residual(problem, x, Ytry)
            rho_try = _rms(vect)
            if np.isfinite(rho_try) and rho_try < (1.0 - 1e-4 * lam) * rho:
                break
            lam *= options.damping_factor
            if lam < options.min_damping:
                return Y, F, False, iters, (
                    f"no descent at damping floor (rms {rho:.3e})")
        slow = slow + 1 if rho_try > 0.6 * rho else 0
        Y, F, Ymid, Fmid, vec, rho = Ytry, Ft, Ymt, Fmt, vect, rho_try
        iters += 1
        options.emit(f"newton iter={iters} rms={rho:.3e} damping={lam:.3g} nodes={m}")
        # an iteration far from the target that keeps contracting weakly is
        # not going to make it within the budget; give up early when asked
        if (options.stall_patience is not None and slow >= options.stall_patience
                and rho > 100.0 * target):
            return Y, F, False, iters, (
                f"newton contracting too slowly (rms {rho:.3e} "
                f"after {iters} iterations)")
    if rho <= target:
        return Y, F, True, iters, f"rms residual {rho:.3e}"
    return Y, F, False, iters, f"newton stalled at rms {rho:.3e} after {iters} iterations"


def _defect_residuals(problem: BvpProblem, interpolant, x) -> np.ndarray:
    """Normalized rms defect of the interpolant per interval."""
    h = np.diff(x)
    ts = (x[:-1, None] + np.outer(h, _LOBATTO_TAU)).ravel()
    P = interpolant(ts)
    dP = interpolant.derivative()(ts)
    defect = dP - problem.rhs(ts, P)
    scaled = defect / (1.0 + np.abs(P))
    point_sq = np.mean(scaled ** 2, axis=0).reshape(len(h), len(_LOBATTO_TAU))
    return np.sqrt(point_sq @ _LOBATTO_W)


def _interp(x, Y, F) -> CubicHermiteSpline:
    return CubicHermiteSpline(x, Y, F, axis=1)


def solve_bvp(problem: BvpProblem, initial_mesh, guess,
              options: SolverOptions | None = None) -> BvpSolution:
    """Collocation solve with refinement until the defect meets tol.

    The mesh is refined by splitting every interval whose normalized
    defect exceeds tol; neighbors of intervals over 10x tol are split
    too.  Non-converged statuses still return the best iterate so the
    caller can warm-start a retry.
    """
    options = options or SolverOptions()
    x = np.asarray(initial_mesh, dtype=float)
    if x.ndim != 1 or len(x) < 2 or np.any(np.diff(x) <= 0):
        raise ValueError("mesh must be strictly increasing with at least 2 nodes")
    if abs(x[0] - problem.a) > 1e-12 or abs(x[-1] - problem.b) > 1e-12:
        raise ValueError(f"mesh endpoints {x[0]}, {x[-1]} do not match [{problem.a}, {problem.b}]")
    Y = np.array(guess, dtype=float)
    if Y.shape != (problem.n, len(x)):
        raise ValueError(f"guess shape {Y.shape} does not match ({problem.n}, {len(x)})")
    if not np.all(np.isfinite(problem.rhs(x, Y))):
        raise ValueError("rhs is not finite at the initial guess")
    max_nodes = options.max_nodes or 20 * len(x)
    total_iters = 0
    while True:
        Y, F, ok, iters, message = _run_newton(problem, x, Y, options)
        total_iters += iters
        interpolant = _interp(x, Y, F)
        residuals = _defect_residuals(problem, interpolant, x)
        if not ok:
            return BvpSolution(x, Y, interpolant, residuals, total_iters,
                               STATUS_NEWTON_FAILED, message)
        worst = residuals.max()
        if worst <= options.tol:
            return BvpSolution(x, Y, interpolant, residuals, total_iters,
                               STATUS_CONVERGED, message)
        split = residuals > options.tol
        bad = np.flatnonzero(residuals > 10.0 * options.tol)
        for i in bad:
            if i > 0:
                split[i - 1] = True
            if i < len(split) - 1:
                split[i + 1] = True
        mids = x[:-1][split] + np.diff(x)[split] / 2.0
        new_x = np.sort(np.concatenate([x, mids]))
        if len(new_x) > max_nodes:
            return BvpSolution(x, Y, interpolant, residuals, total_iters,
                               STATUS_MAX_NODES,
                               f"refinement needs {len(new_x)} nodes, cap is {max_nodes}")
        options.emit(f"mesh refined {len(x)} -> {len(new_x)} nodes "
                     f"(max defect {worst:.3e})")
        Y = interpolant(new_x)
        x = new_x


def evaluate(solution: BvpSolution, t) -> np.ndarray:
    """Interpolant values at t; exact nodal states at mesh points."""
    scalar = np.ndim(t) == 0
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    a, b = solution.mesh[0], solution.mesh[-1]
    slack = 1e-10 * (b - a)
    if ts.min() < a - slack or ts.max() > b + slack:
        raise ValueError(f"evaluation time outside [{a}, {b}]")
    values = solution.interpolant(ts)
    pos = np.searchsorted(solution.mesh, ts)
    pos = np.clip(pos, 0, len(solution.mesh) - 1)
    exact = solution.mesh[pos] == ts
    values[:, exact] = solution.states[:, pos[exact]]
    return values[:, 0] if scalar else values


def estimate_residual(solution: BvpSolution, problem: BvpProblem) -> np.ndarray:
    """Per-interval normalized defect, recomputed from the nodal states.

    Rebuilds the interpolant from solution.mesh and solution.states, so
    perturbed nodal data is reflected (the solve-time values live in
    solution.residuals).
    """
    F = problem.rhs(solution.mesh, solution.states)
    interpolant = _interp(solution.mesh, solution.states, F)
    return _defect_residuals(problem, interpolant, solution.mesh)
