"""Lanczos approximation of exp(-i t H) v for Hermitian H given as a matvec."""
from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.linalg import eigh_tridiagonal

Matvec = Callable[[np.ndarray], np.ndarray]


def _lanczos(matvec: Matvec, v: np.ndarray, m_max: int):
    n = v.shape[0]
    m_max = min(m_max, n)
    beta0 = np.linalg.norm(v)
    Q = np.empty((m_max + 1, n), dtype=complex)
    alpha = np.zeros(m_max)
    beta = np.zeros(m_max)
    Q[0] = v / beta0
    m = m_max
    for j in range(m_max):
        w = matvec(Q[j])
        alpha[j] = np.vdot(Q[j], w).real
        w = w - alpha[j] * Q[j]
        if j > 0:
            w = w - beta[j - 1] * Q[j - 1]
        # full reorthogonalisation keeps small subspaces clean
        w = w - Q[: j + 1].T @ (Q[: j + 1].conj() @ w)
        beta[j] = np.linalg.norm(w)
        if beta[j] < 1e-13 * max(1.0, abs(alpha[j])):
            m = j + 1
            beta[j] = 0.0
            break
        Q[j + 1] = w / beta[j]
    return Q, alpha[:m], beta[:m], beta0, m


def expm_krylov(
    matvec: Matvec,
    v: np.ndarray,
    t: float,
    tol: float = 1e-10,
    m_max: int = 30,
) -> np.ndarray:
    """Return exp(-i t H) v.

    The Lanczos subspace grows up to ``m_max``; when the a-posteriori error
    estimate for the full interval exceeds ``tol`` the step is split in halves
    recursively until each piece converges.
    """
    v = np.asarray(v, dtype=complex)
    if t == 0.0:
        return v.copy()
    if not np.isfinite(t):
        raise ValueError(f"non-finite duration {t!r}")
    norm = np.linalg.norm(v)
    if norm == 0.0:
        return v.copy()

    remaining = float(t)
    dt = remaining
    out = v
    while remaining != 0.0:
        step = dt if abs(dt) <= abs(remaining) else remaining
        Q, alpha, beta, beta0, m = _lanczos(matvec, out, m_max)
        if m == 1:
            evals, evecs = np.array([alpha[0]]), np.ones((1, 1))
        else:
            evals, evecs = eigh_tridiagonal(alpha, beta[: m - 1])
        coeff = evecs @ (np.exp(-1j * step * evals) * evecs[0])
        # residual estimate; zero when the subspace is invariant
        err = beta0 * beta[m - 1] * abs(coeff[m - 1])
        if err > tol and beta[m - 1] != 0.0:
            dt = step / 2.0
            continue
        out = beta0 * (coeff @ Q[:m])
        remaining -= step
        if err < tol * 1e-3:
            dt = step * 2.0
    return out
