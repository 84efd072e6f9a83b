"""Generalized Gell-Mann operator basis for su(d).

Construction of the d**2 - 1 traceless Hermitian basis operators, Bloch
decomposition and reconstruction of arbitrary operators, and the SU(d)
structure constants (g, f) in sparse triplet form with a disk cache.

Basis ordering is pair-interleaved: index pairs (m, k), 1 <= m < k <= d,
run in lexicographic order and each pair contributes its symmetric
operator first and its antisymmetric operator second; the d - 1 diagonal
operators close the list.  ``basis_index`` / ``basis_label`` make the
convention explicit, and the cache files carry the tag ``interleaved-v1``.
For d = 2 the resulting order is exactly (sigma_1, sigma_2, sigma_3).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

__all__ = [
    "ORDERING_TAG",
    "BasisOperator",
    "OperatorBasis",
    "BlochDecomposition",
    "StructureConstants",
    "build_basis",
    "basis_index",
    "basis_label",
    "decompose",
    "reconstruct",
    "structure_constants",
    "product_expand",
    "save_structure_constants",
    "load_structure_constants",
    "default_cache_dir",
]

ORDERING_TAG = "interleaved-v1"
CACHE_ENV_VAR = "GATESYNTH_CACHE_DIR"

# Trace evaluations below this magnitude are floating-point noise, not
# genuine structure-constant entries.
ZERO_THRESHOLD = 1e-14

_CACHE_FORMAT_VERSION = 1

# In-process memo so repeated model compilations share one tensor set.
_SC_MEMO: dict[int, "StructureConstants"] = {}


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class BasisOperator:
    """A single traceless Hermitian basis operator in sparse triplet form.

    Attributes
    ----------
    dim : int
        Hilbert-space dimension d.
    kind : str
        One of ``"sym"``, ``"asym"``, ``"diag"``.
    indices : tuple
        ``(m, k)`` with m < k for sym/asym, ``(l,)`` for diag (1-based).
    rows, cols, vals : ndarray
        Triplet data; at most d entries.
    """

    dim: int
    kind: str
    indices: tuple[int, ...]
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray

    def dense(self) -> np.ndarray:
        """Materialize the operator as a dense (d, d) complex matrix."""
        out = np.zeros((self.dim, self.dim), dtype=np.complex128)
        out[self.rows, self.cols] = self.vals
        return out


def _sym_operator(d: int, m: int, k: int) -> BasisOperator:
    # |m><k| + |k><m|, 1-based kets
    rows = np.array([m - 1, k - 1], dtype=np.intp)
    cols = np.array([k - 1, m - 1], dtype=np.intp)
    vals = np.array([1.0, 1.0], dtype=np.complex128)
    return BasisOperator(d, "sym", (m, k), _frozen(rows), _frozen(cols), _frozen(vals))


def _asym_operator(d: int, m: int, k: int) -> BasisOperator:
    # -i|m><k| + i|k><m|
    rows = np.array([m - 1, k - 1], dtype=np.intp)
    cols = np.array([k - 1, m - 1], dtype=np.intp)
    vals = np.array([-1j, 1j], dtype=np.complex128)
    return BasisOperator(d, "asym", (m, k), _frozen(rows), _frozen(cols), _frozen(vals))


def _diag_operator(d: int, l: int) -> BasisOperator:
    # sqrt(2/(l(l+1))) * (sum_{j<=l} |j><j| - l |l+1><l+1|)
    scale = math.sqrt(2.0 / (l * (l + 1)))
    idx = np.arange(l + 1, dtype=np.intp)
    vals = np.full(l + 1, scale, dtype=np.complex128)
    vals[l] = -l * scale
    return BasisOperator(d, "diag", (l,), _frozen(idx), _frozen(idx.copy()), _frozen(vals))


def _pair_rank(m: int, k: int, d: int) -> int:
    """1-based rank of the pair (m, k), m < k, in lexicographic order."""
    return (m - 1) * d - m * (m - 1) // 2 + (k - m)


def basis_index(kind: str, indices, d: int) -> int:
    """Position (1-based) of a basis operator in the interleaved ordering.

    Parameters
    ----------
    kind : {"sym", "asym", "diag"}
    indices : tuple (m, k) for sym/asym, or int/1-tuple l for diag
    d : int
        Hilbert-space dimension.

    Returns
    -------
    int in 1 .. d**2 - 1.
    """
    if d < 2:
        raise ValueError(f"dimension must be >= 2, got {d}")
    if kind in ("sym", "asym"):
        try:
            m, k = indices
        except (TypeError, ValueError):
            raise ValueError(f"{kind} operators need an index pair, got {indices!r}") from None
        if not (1 <= m < k <= d):
            raise ValueError(f"need 1 <= m < k <= d, got (m, k) = ({m}, {k}) for d = {d}")
        rank = _pair_rank(m, k, d)
        return 2 * rank - 1 if kind == "sym" else 2 * rank
    if kind == "diag":
        l = indices[0] if isinstance(indices, (tuple, list)) else indices
        if not (1 <= l <= d - 1):
            raise ValueError(f"need 1 <= l <= d-1, got l = {l} for d = {d}")
        return d * (d - 1) + l
    raise ValueError(f"unknown operator kind {kind!r}")


def basis_label(position: int, d: int) -> tuple[str, tuple[int, ...]]:
    """Inverse of :func:`basis_index`: position -> (kind, indices)."""
    n = d * d - 1
    if not (1 <= position <= n):
        raise ValueError(f"position must be in 1..{n}, got {position}")
    if position > d * (d - 1):
        return "diag", (position - d * (d - 1),)
    rank, rem = divmod(position - 1, 2)
    rank += 1
    # Invert the lexicographic pair rank by walking rows of fixed m.
    m = 1
    while rank > d - m:
        rank -= d - m
        m += 1
    k = m + rank
    return ("sym" if rem == 0 else "asym"), (m, k)


@dataclass(frozen=True)
class OperatorBasis:
    """Ordered tuple of the d**2 - 1 basis operators with index lookup."""

    dim: int
    ops: tuple[BasisOperator, ...]

    @property
    def n_ops(self) -> int:
        return self.dim * self.dim - 1

    @cached_property
    def dense_ops(self) -> np.ndarray:
        """Stacked dense operators, shape (d**2 - 1, d, d)."""
        return _frozen(np.stack([op.dense() for op in self.ops]))

    def index(self, kind: str, indices) -> int:
        """1-based position of the operator labelled (kind, indices)."""
        return basis_index(kind, indices, self.dim)

    def label(self, position: int) -> tuple[str, tuple[int, ...]]:
        """(kind, indices) of the operator at a 1-based position."""
        return basis_label(position, self.dim)

    def operator(self, position: int) -> BasisOperator:
        """Basis operator at a 1-based position."""
        if not (1 <= position <= self.n_ops):
            raise ValueError(f"position must be in 1..{self.n_ops}, got {position}")
        return self.ops[position - 1]


def build_basis(d: int) -> OperatorBasis:
    """Construct the generalized Gell-Mann basis for dimension d >= 2.

    Returns the d**2 - 1 operators in interleaved order (see module
    docstring).  Every operator is Hermitian, traceless, and normalized
    so that tr[Y_k Y_m] = 2 delta_km.
    """
    if not isinstance(d, (int, np.integer)):
        raise ValueError(f"dimension must be an integer, got {type(d).__name__}")
    if d < 2:
        raise ValueError(f"dimension must be >= 2, got {d}")
    d = int(d)
    ops: list[BasisOperator] = []
    for m in range(1, d + 1):
        for k in range(m + 1, d + 1):
            ops.append(_sym_operator(d, m, k))
            ops.append(_asym_operator(d, m, k))
    for l in range(1, d):
        ops.append(_diag_operator(d, l))
    return OperatorBasis(dim=d, ops=tuple(ops))


@dataclass(frozen=True)
class BlochDecomposition:
    """Coefficients of an operator X in the basis expansion.

    X = scalar * I + sqrt(d/2) * sum_j vec[j] * Y_j, with
    scalar = tr[X]/d and vec[j] = tr[Y_j X]/sqrt(2d).  For any X the
    norm identity |scalar|**2 + ||vec||**2 = tr[X^dag X]/d holds.
    """

    scalar: complex
    vec: np.ndarray


def decompose(X: np.ndarray, basis: OperatorBasis) -> BlochDecomposition:
    """Bloch decomposition of a (d, d) operator over the given basis."""
    X = np.asarray(X, dtype=np.complex128)
    d = basis.dim
    if X.shape != (d, d):
        raise ValueError(f"operator shape {X.shape} does not match basis dimension {d}")
    scalar = complex(np.trace(X)) / d
    vec = np.einsum("jab,ba->j", basis.dense_ops, X) / math.sqrt(2 * d)
    return BlochDecomposition(scalar=scalar, vec=vec)


def reconstruct(dec: BlochDecomposition, basis: OperatorBasis) -> np.ndarray:
    """Rebuild the dense operator from its Bloch decomposition."""
    d = basis.dim
    vec = np.asarray(dec.vec, dtype=np.complex128)
    if vec.shape != (basis.n_ops,):
        raise ValueError(f"vector length {vec.shape} does not match basis size {basis.n_ops}")
    out = np.einsum("j,jab->ab", vec, basis.dense_ops) * math.sqrt(d / 2.0)
    out[np.diag_indices(d)] += dec.scalar
    return out


@dataclass(frozen=True)
class StructureConstants:
    """Sparse su(d) structure constants.

    g_kml = tr[{Y_k, Y_m} Y_l]/4 (totally symmetric) and
    f_kml = tr[[Y_k, Y_m] Y_l]/(4i) (totally antisymmetric), stored as
    0-based triplet arrays with entries below ``ZERO_THRESHOLD`` dropped.
    """

    dim: int
    g_indices: np.ndarray  # (nnz, 3) int32, 0-based (k, m, l)
    g_values: np.ndarray
    f_indices: np.ndarray
    f_values: np.ndarray

    @property
    def n_ops(self) -> int:
        return self.dim * self.dim - 1

    @cached_property
    def _lookup(self) -> tuple[dict, dict]:
        gmap = {tuple(idx): val for idx, val in zip(map(tuple, self.g_indices), self.g_values)}
        fmap = {tuple(idx): val for idx, val in zip(map(tuple, self.f_indices), self.f_values)}
        return gmap, fmap

    def g(self, k: int, m: int, l: int) -> float:
        """Symmetric constant g_kml, 1-based indices."""
        return self._lookup[0].get((k - 1, m - 1, l - 1), 0.0)

    def f(self, k: int, m: int, l: int) -> float:
        """Antisymmetric constant f_kml, 1-based indices."""
        return self._lookup[1].get((k - 1, m - 1, l - 1), 0.0)

    @cached_property
    def dense_g(self) -> np.ndarray:
        out = np.zeros((self.n_ops,) * 3)
        out[tuple(self.g_indices.T)] = self.g_values
        return _frozen(out)

    @cached_property
    def dense_f(self) -> np.ndarray:
        out = np.zeros((self.n_ops,) * 3)
        out[tuple(self.f_indices.T)] = self.f_values
        return _frozen(out)

    @cached_property
    def _z(self) -> np.ndarray:
        # Combined tensor z_kml = g_kml + i f_kml, dense; at most a few MB
        # for d = 8 and reused by every contraction.
        return _frozen(self.dense_g + 1j * self.dense_f)

    def contraction_matrix(self, vec: np.ndarray) -> np.ndarray:
        """Matrix M with M[j, m] = sum_k (g_kmj + i f_kmj) vec[k].

        For real ``vec`` the result is Hermitian; scaled by sqrt(d/2) it
        is the mixing matrix appearing in the Bloch equations of motion
        and in the unitarity component relations.
        """
        vec = np.asarray(vec, dtype=np.complex128)
        if vec.shape != (self.n_ops,):
            raise ValueError(f"vector length {vec.shape} does not match basis size {self.n_ops}")
        return np.einsum("k,kmj->jm", vec, self._z)


def product_expand(k: int, m: int, sc: StructureConstants) -> tuple[complex, np.ndarray]:
    """Expansion coefficients of the operator product Y_k Y_m.

    Returns (scalar, vec) with scalar = (2/d) delta_km and
    vec[l] = g_kml + i f_kml, such that
    Y_k Y_m = scalar * I + sum_l vec[l] * Y_l.  Note the plain (not
    sqrt(d/2)-scaled) combination: the expansion is in the operators
    themselves, not a Bloch decomposition.
    """
    n = sc.n_ops
    if not (1 <= k <= n and 1 <= m <= n):
        raise ValueError(f"indices must be in 1..{n}, got ({k}, {m})")
    scalar = 2.0 / sc.dim if k == m else 0.0
    vec = sc._z[k - 1, m - 1, :].copy()
    return complex(scalar), vec


def _compute_structure_constants(basis: OperatorBasis) -> StructureConstants:
    ops = basis.dense_ops
    # T_kml = tr[Y_k Y_m Y_l]; symmetrize/antisymmetrize in (k, m).
    prod = np.einsum("aij,bjk->abik", ops, ops)
    T = np.einsum("abij,cji->abc", prod, ops)
    g_full = (T + T.transpose(1, 0, 2)) / 4.0
    f_full = (T - T.transpose(1, 0, 2)) / 4.0j
    worst = max(np.abs(g_full.imag).max(), np.abs(f_full.imag).max())
    if worst > 1e-12:
        raise ValueError(f"structure constants not real: max imaginary part {worst:.3e}")
    g_full = g_full.real
    f_full = f_full.real

    def sparsify(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        idx = np.argwhere(np.abs(t) >= ZERO_THRESHOLD).astype(np.int32)
        return _frozen(idx), _frozen(t[tuple(idx.T)])

    g_idx, g_val = sparsify(g_full)
    f_idx, f_val = sparsify(f_full)
    return StructureConstants(basis.dim, g_idx, g_val, f_idx, f_val)


def default_cache_dir() -> Path:
    """Cache directory: $GATESYNTH_CACHE_DIR or ~/.cache/gatesynth."""
    env = os.environ.get(CACHE_ENV_VAR)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "gatesynth"


def _cache_path(d: int, cache_dir) -> Path:
    base = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    return base / f"structure-constants-d{d}.json"


def save_structure_constants(sc: StructureConstants, path) -> Path:
    """Write the tensors as a versioned JSON file (1-based triples)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": _CACHE_FORMAT_VERSION,
        "ordering": ORDERING_TAG,
        "dim": sc.dim,
        "g": [[int(k) + 1, int(m) + 1, int(l) + 1, float(v)]
              for (k, m, l), v in zip(sc.g_indices, sc.g_values)],
        "f": [[int(k) + 1, int(m) + 1, int(l) + 1, float(v)]
              for (k, m, l), v in zip(sc.f_indices, sc.f_values)],
    }
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(payload))
    tmp.replace(path)
    return path


def load_structure_constants(path) -> StructureConstants:
    """Read tensors written by :func:`save_structure_constants`."""
    payload = json.loads(Path(path).read_text())
    if payload.get("version") != _CACHE_FORMAT_VERSION:
        raise ValueError(f"unsupported cache version {payload.get('version')!r}")
    if payload.get("ordering") != ORDERING_TAG:
        raise ValueError(f"cache ordering tag {payload.get('ordering')!r} != {ORDERING_TAG!r}")
    d = int(payload["dim"])

    def unpack(rows):
        if not rows:
            n = 0
            return (_frozen(np.zeros((0, 3), dtype=np.int32)), _frozen(np.zeros(0)))
        arr = np.asarray(rows, dtype=float)
        idx = arr[:, :3].astype(np.int32) - 1
        return _frozen(idx), _frozen(arr[:, 3].copy())

    g_idx, g_val = unpack(payload["g"])
    f_idx, f_val = unpack(payload["f"])
    return StructureConstants(d, g_idx, g_val, f_idx, f_val)


def structure_constants(basis: OperatorBasis, *, cache: bool = True,
                        cache_dir=None) -> StructureConstants:
    """Structure constants for the basis, with memo and disk cache.

    Set ``cache=False`` to force a fresh trace evaluation that bypasses
    both the in-process memo and the disk cache.
    """
    d = basis.dim
    if cache and d in _SC_MEMO:
        return _SC_MEMO[d]
    sc = None
    path = _cache_path(d, cache_dir)
    if cache and path.exists():
        try:
            loaded = load_structure_constants(path)
            if loaded.dim == d:
                sc = loaded
        except (ValueError, KeyError, OSError, json.JSONDecodeError):
            sc = None  # stale or corrupt cache; recompute below
    if sc is None:
        sc = _compute_structure_constants(basis)
        if cache:
            try:
                save_structure_constants(sc, path)
            except OSError:
                pass  # cache is an optimization, never a hard failure
    if cache:
        _SC_MEMO[d] = sc
    return sc
