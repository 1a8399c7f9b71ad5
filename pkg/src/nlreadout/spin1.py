"""Exact dynamics of a single-mode spin-1 condensate in the symmetric Fock basis.

The Hamiltonian

    H = c2/(2N) [ (2 a0^+ a0^+ a1 a-1 + h.c.) + (2 N0 - 1)(N - N0) ] - q N0

conserves the magnetization Lz = N+1 - N-1, so the (N+1)(N+2)/2 dimensional
space splits into blocks labelled by m in [-N, N].  Inside block m the Fock
states are ordered by the occupation n-1 and H is real tridiagonal.

Times are measured in units of 1/|c2| when c2 = -1 (the default).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Mapping

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh_tridiagonal

from .krylov import expm_krylov

PRUNE_MASS = 1e-24
DIRECT_DIM = 32


@dataclass(frozen=True)
class SystemParams:
    N: int
    c2: float = -1.0
    q: float = 0.0

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"atom number must be a positive integer, got {self.N!r}")
        if not (np.isfinite(self.c2) and np.isfinite(self.q)):
            raise ValueError("c2 and q must be finite")

    def with_q(self, q: float) -> "SystemParams":
        return SystemParams(self.N, self.c2, q)


class FockBasis:
    """Enumeration of (n+1, n0, n-1) occupations, block by block."""

    def __init__(self, N: int):
        if int(N) != N or N < 1:
            raise ValueError(f"atom number must be a positive integer, got {N!r}")
        self.N = int(N)
        self._states: dict[int, np.ndarray] = {}

    def __repr__(self):
        return f"FockBasis(N={self.N})"

    def __eq__(self, other):
        return isinstance(other, FockBasis) and other.N == self.N

    def __hash__(self):
        return hash(("FockBasis", self.N))

    @property
    def blocks(self) -> range:
        return range(-self.N, self.N + 1)

    def block_dim(self, m: int) -> int:
        if abs(m) > self.N:
            raise ValueError(f"magnetization {m} outside [-{self.N}, {self.N}]")
        return (self.N - abs(m)) // 2 + 1

    @property
    def dim(self) -> int:
        return (self.N + 1) * (self.N + 2) // 2

    def states(self, m: int) -> np.ndarray:
        """Occupations (n+1, n0, n-1) of block ``m``, shape (dim, 3)."""
        if m not in self._states:
            d = self.block_dim(m)
            n_minus = np.arange(d) + max(0, -m)
            n_plus = n_minus + m
            n_zero = self.N - n_plus - n_minus
            self._states[m] = np.stack([n_plus, n_zero, n_minus], axis=1)
        return self._states[m]

    def index(self, n_plus: int, n_zero: int, n_minus: int) -> tuple[int, int]:
        """(block, position) of a Fock state."""
        if n_plus + n_zero + n_minus != self.N or min(n_plus, n_zero, n_minus) < 0:
            raise ValueError("occupations do not describe a state of this basis")
        m = n_plus - n_minus
        return m, n_minus - max(0, -m)

    @cached_property
    def offsets(self) -> dict[int, int]:
        out, pos = {}, 0
        for m in self.blocks:
            out[m] = pos
            pos += self.block_dim(m)
        return out

    def hamiltonian_block(self, m: int, c2: float, q: float) -> tuple[np.ndarray, np.ndarray]:
        """Diagonal and first off-diagonal of H restricted to block ``m``."""
        s = self.states(m).astype(float)
        n0 = s[:, 1]
        diag = c2 / (2 * self.N) * (2 * n0 - 1) * (self.N - n0) - q * n0
        # a0^+ a0^+ a1 a-1 lowers n-1 by one: state k+1 -> state k
        up = s[1:]
        off = c2 / self.N * np.sqrt(up[:, 0] * up[:, 2] * (up[:, 1] + 1) * (up[:, 1] + 2))
        return diag, off

    def lplus_block(self, m: int) -> sp.csr_matrix:
        """L+ = sqrt(2)(a1^+ a0 + a0^+ a-1) from block m into block m+1."""
        d_to = self.block_dim(m + 1)
        s = self.states(m)
        base_to = max(0, -(m + 1))
        rows, cols, vals = [], [], []
        for k, (npl, n0, nmi) in enumerate(s):
            if n0 > 0:  # a1^+ a0
                rows.append(nmi - base_to)
                cols.append(k)
                vals.append(np.sqrt(2.0 * (npl + 1) * n0))
            if nmi > 0:  # a0^+ a-1
                rows.append(nmi - 1 - base_to)
                cols.append(k)
                vals.append(np.sqrt(2.0 * (n0 + 1) * nmi))
        return sp.csr_matrix((vals, (rows, cols)), shape=(d_to, len(s)))

    @cached_property
    def lplus(self) -> sp.csr_matrix:
        """L+ on the full space."""
        blocks = [[None] * (2 * self.N + 1) for _ in range(2 * self.N + 1)]
        for i, m in enumerate(self.blocks):
            blocks[i][i] = sp.csr_matrix((self.block_dim(m), self.block_dim(m)))
            if m < self.N:
                blocks[i + 1][i] = self.lplus_block(m)
        return sp.bmat(blocks, format="csr")

    @cached_property
    def lx(self) -> sp.csr_matrix:
        lp = self.lplus
        return ((lp + lp.T) * 0.5).tocsr()

    def n0_full(self) -> np.ndarray:
        return np.concatenate([self.states(m)[:, 1] for m in self.blocks]).astype(float)

    def m_full(self) -> np.ndarray:
        return np.concatenate([np.full(self.block_dim(m), m) for m in self.blocks]).astype(float)


@lru_cache(maxsize=32)
def build_basis(N: int) -> FockBasis:
    return FockBasis(N)


@dataclass(frozen=True, eq=False)
class SpinorFockState:
    """Amplitudes over the populated magnetization blocks.

    Arrays are treated as immutable; operations return new states.
    """

    basis: FockBasis
    blocks: Mapping[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for m, amp in self.blocks.items():
            if amp.shape[0] != self.basis.block_dim(m):
                raise ValueError(f"block {m} has {amp.shape[0]} amplitudes, expected {self.basis.block_dim(m)}")
            if not np.all(np.isfinite(amp)):
                raise ValueError("non-finite amplitudes")

    @property
    def N(self) -> int:
        return self.basis.N

    def norm(self) -> float:
        return float(np.sqrt(sum(np.vdot(a, a).real for a in self.blocks.values())))

    def amplitude(self, n_plus: int, n_zero: int, n_minus: int) -> complex:
        m, k = self.basis.index(n_plus, n_zero, n_minus)
        return complex(self.blocks[m][k]) if m in self.blocks else 0.0j

    def to_vector(self) -> np.ndarray:
        out = np.zeros(self.basis.dim, dtype=complex)
        for m, amp in self.blocks.items():
            o = self.basis.offsets[m]
            out[o:o + amp.shape[0]] = amp
        return out

    @classmethod
    def from_vector(cls, basis: FockBasis, vec: np.ndarray, prune: float = PRUNE_MASS) -> "SpinorFockState":
        blocks = {}
        for m in basis.blocks:
            o = basis.offsets[m]
            amp = np.array(vec[o:o + basis.block_dim(m)], dtype=complex)
            if np.vdot(amp, amp).real >= prune:
                blocks[m] = amp
        return cls(basis, blocks)._normalized()

    def _normalized(self) -> "SpinorFockState":
        n = self.norm()
        if n == 0.0:
            raise ValueError("state has zero norm")
        return SpinorFockState(self.basis, {m: a / n for m, a in self.blocks.items()})


def _require_same(a: SpinorFockState, b: SpinorFockState):
    if a.basis.N != b.basis.N:
        raise ValueError(f"basis mismatch: N={a.basis.N} vs N={b.basis.N}")


def polar_state(basis: FockBasis) -> SpinorFockState:
    amp = np.zeros(basis.block_dim(0), dtype=complex)
    amp[basis.index(0, basis.N, 0)[1]] = 1.0
    return SpinorFockState(basis, {0: amp})


def _tridiag_matvec(diag: np.ndarray, off: np.ndarray):
    def matvec(x):
        y = diag * x
        if off.size:
            y[:-1] += off * x[1:]
            y[1:] += off * x[:-1]
        return y
    return matvec


def apply_hamiltonian(state: SpinorFockState, params: SystemParams) -> SpinorFockState:
    """H|psi>, block by block.  The result is not normalized."""
    if params.N != state.N:
        raise ValueError(f"basis mismatch: state N={state.N}, params N={params.N}")
    out = {}
    for m, amp in state.blocks.items():
        d, o = state.basis.hamiltonian_block(m, params.c2, params.q)
        out[m] = _tridiag_matvec(d, o)(amp.astype(complex))
    return SpinorFockState(state.basis, out)


def energy(state: SpinorFockState, params: SystemParams) -> float:
    h = apply_hamiltonian(state, params)
    return float(sum(np.vdot(state.blocks[m], h.blocks[m]).real for m in state.blocks))


def evolve(state: SpinorFockState, params: SystemParams, duration: float, tol: float = 1e-10) -> SpinorFockState:
    """exp(-i H duration)|psi> with q held constant.

    Blocks up to ``DIRECT_DIM`` are diagonalized outright (a Lanczos space
    would span them anyway); larger ones use the Krylov exponential.  The
    result is not renormalized.
    """
    if not np.isfinite(duration):
        raise ValueError(f"non-finite duration {duration!r}")
    if duration < 0:
        raise ValueError("duration must be non-negative")
    if params.N != state.N:
        raise ValueError(f"basis mismatch: state N={state.N}, params N={params.N}")
    if duration == 0:
        return state
    out = {}
    direct = BlockEvolver(state.basis, params.c2)
    for m, amp in state.blocks.items():
        if amp.shape[0] <= DIRECT_DIM:
            out[m] = direct.propagate({m: amp}, params.q, duration)[m]
        else:
            d, o = state.basis.hamiltonian_block(m, params.c2, params.q)
            out[m] = expm_krylov(_tridiag_matvec(d, o), amp, duration, tol=tol)
    return SpinorFockState(state.basis, out)


def ground_state(params: SystemParams, block: int = 0) -> SpinorFockState:
    basis = build_basis(params.N)
    d, o = basis.hamiltonian_block(block, params.c2, params.q)
    if d.size == 1:
        vec = np.ones(1)
    else:
        _, v = eigh_tridiagonal(d, o, select="i", select_range=(0, 0))
        vec = v[:, 0]
    vec = vec * np.sign(vec[np.argmax(np.abs(vec))])
    return SpinorFockState(basis, {block: vec.astype(complex)})._normalized()


def rotate_about_Lx(state: SpinorFockState, phi: float) -> SpinorFockState:
    """exp(-i phi Lx)|psi> on the full space; blocks below the prune mass are dropped."""
    if not np.isfinite(phi):
        raise ValueError(f"non-finite angle {phi!r}")
    if phi == 0:
        return state
    lx = state.basis.lx
    vec = expm_krylov(lambda x: lx @ x, state.to_vector(), phi, tol=1e-12)
    return SpinorFockState.from_vector(state.basis, vec)


def fidelity(a: SpinorFockState, b: SpinorFockState) -> float:
    _require_same(a, b)
    ov = sum(np.vdot(a.blocks[m], b.blocks[m]) for m in a.blocks if m in b.blocks)
    return float(min(1.0, abs(ov) ** 2))


@dataclass(frozen=True)
class ObservableSet:
    mean_rho0: float
    var_rho0: float
    mean_L2: float
    mean_Lx2: float
    mean_Lz2: float
    var_Lz2: float
    spin_mixing_correlator: complex

    @property
    def spinor_phase(self) -> float:
        return float(np.angle(self.spin_mixing_correlator))


def correlator_block(basis: FockBasis, m: int, amp: np.ndarray) -> np.ndarray:
    """<a+1^+ a-1^+ a0 a0> in block m; trailing axes of ``amp`` are batch axes."""
    s = basis.states(m).astype(float)
    if s.shape[0] < 2:
        return np.zeros(amp.shape[1:], dtype=complex)
    lo = s[:-1]
    w = np.sqrt((lo[:, 0] + 1) * (lo[:, 2] + 1) * lo[:, 1] * (lo[:, 1] - 1))
    w = w.reshape((-1,) + (1,) * (amp.ndim - 1))
    return np.sum(np.conj(amp[1:]) * w * amp[:-1], axis=0)


def observables(state: SpinorFockState) -> ObservableSet:
    basis, N = state.basis, state.N
    n0_1 = n0_2 = lz2 = lz4 = lz1 = 0.0
    corr = 0.0j
    for m, amp in state.blocks.items():
        p = np.abs(amp) ** 2
        n0 = basis.states(m)[:, 1]
        n0_1 += p @ n0
        n0_2 += p @ n0 ** 2
        pm = p.sum()
        lz1 += pm * m
        lz2 += pm * m * m
        lz4 += pm * m ** 4
        corr += correlator_block(basis, m, amp)
    vec = state.to_vector()
    lp = basis.lplus @ vec
    lx = basis.lx @ vec
    mean_L2 = np.vdot(lp, lp).real + lz2 + lz1
    return ObservableSet(
        mean_rho0=float(n0_1 / N),
        var_rho0=float(max(0.0, n0_2 - n0_1 ** 2) / N ** 2),
        mean_L2=float(mean_L2),
        mean_Lx2=float(np.vdot(lx, lx).real),
        mean_Lz2=float(lz2),
        var_Lz2=float(max(0.0, lz4 - lz2 ** 2)),
        spin_mixing_correlator=complex(corr),
    )


def rho0_distribution(state: SpinorFockState) -> tuple[np.ndarray, np.ndarray]:
    """Values n0/N and their probabilities (length N+1, n0 = 0..N)."""
    N = state.N
    probs = np.zeros(N + 1)
    for m, amp in state.blocks.items():
        np.add.at(probs, state.basis.states(m)[:, 1], np.abs(amp) ** 2)
    return np.arange(N + 1) / N, probs


class BlockEvolver:
    """Exact propagation of many states at once by per-block diagonalization.

    ``blocks`` maps magnetization to arrays of shape (dim, K): K copies (for
    example a family of phase-encoded probes) evolved under the same q.
    Blocks m and -m share one Hamiltonian, so each |m| is diagonalized once
    per q value.
    """

    def __init__(self, basis: FockBasis, c2: float = -1.0, cache_size: int = 4096):
        self.basis = basis
        self.c2 = c2
        self._cache: dict[tuple[int, float], tuple[np.ndarray, np.ndarray]] = {}
        self._cache_size = cache_size

    def eig(self, m: int, q: float):
        key = (abs(m), float(q))
        hit = self._cache.get(key)
        if hit is None:
            d, o = self.basis.hamiltonian_block(abs(m), self.c2, q)
            if d.size == 1:
                hit = (d.copy(), np.ones((1, 1)))
            else:
                hit = eigh_tridiagonal(d, o)
            if len(self._cache) >= self._cache_size:
                self._cache.clear()
            self._cache[key] = hit
        return hit

    def propagate(self, blocks: Mapping[int, np.ndarray], q: float, duration: float) -> dict[int, np.ndarray]:
        if duration == 0:
            return dict(blocks)
        out = {}
        for m, amp in blocks.items():
            w, v = self.eig(m, q)
            phase = np.exp(-1j * duration * w)
            if amp.ndim == 1:
                out[m] = v @ (phase * (v.T @ amp))
            else:
                out[m] = v @ (phase[:, None] * (v.T @ amp))
        return out


def block_moments(basis: FockBasis, blocks: Mapping[int, np.ndarray]) -> dict[str, np.ndarray]:
    """Batched <N0>, <N0^2>, <Lz^2>, <Lz^4> and correlator for (dim, K) blocks."""
    acc = None
    for m, amp in blocks.items():
        p = np.abs(amp) ** 2
        n0 = basis.states(m)[:, 1].astype(float)
        pm = p.sum(axis=0)
        part = {
            "n0": n0 @ p,
            "n0sq": (n0 ** 2) @ p,
            "lz2": pm * m * m,
            "lz4": pm * float(m) ** 4,
            "norm": pm,
            "corr": correlator_block(basis, m, amp),
        }
        if acc is None:
            acc = part
        else:
            for k in acc:
                acc[k] = acc[k] + part[k]
    return acc


def rotate_many(state: SpinorFockState, phis: np.ndarray, dense_limit: int = 2500) -> dict[int, np.ndarray]:
    """Copies exp(-i phi Lx)|psi> for every phi, as (dim, K) blocks over all m.

    Small spaces use one dense diagonalization of Lx shared by all angles;
    larger ones fall back to a Lanczos exponential per angle.
    """
    basis = state.basis
    phis = np.asarray(phis, dtype=float)
    vec = state.to_vector()
    if basis.dim <= dense_limit:
        w, v = _lx_eigensystem(basis.N)
        c = v.T @ vec
        full = v @ (np.exp(-1j * np.outer(w, phis)) * c[:, None])
    else:
        lx = basis.lx
        full = np.stack([expm_krylov(lambda x: lx @ x, vec, phi, tol=1e-12) if phi != 0 else vec
                         for phi in phis], axis=1)
    return {m: full[basis.offsets[m]:basis.offsets[m] + basis.block_dim(m)] for m in basis.blocks}


@lru_cache(maxsize=4)
def _lx_eigensystem(N: int):
    basis = build_basis(N)
    return np.linalg.eigh(basis.lx.toarray())
