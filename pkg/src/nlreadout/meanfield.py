"""Mean-field picture of spin mixing on the spin-nematic sphere."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MeanFieldPoint:
    rho0: float
    theta: float
    q: float = 0.0
    c2: float = -1.0

    def __post_init__(self):
        if not 0.0 <= self.rho0 <= 1.0:
            raise ValueError(f"rho0 must lie in [0, 1], got {self.rho0}")


def energy_surface(rho0, theta, q, c2):
    """Single-particle energy c2 rho0 (1 - rho0)(1 + cos theta) - q rho0, vectorized."""
    rho0 = np.asarray(rho0, dtype=float)
    return c2 * rho0 * (1 - rho0) * (1 + np.cos(theta)) - q * rho0


def energy(p: MeanFieldPoint) -> float:
    return float(energy_surface(p.rho0, p.theta, p.q, p.c2))


def sphere_coords(p: MeanFieldPoint) -> tuple[float, float, float]:
    z = 2 * p.rho0 - 1
    r = np.sqrt(max(0.0, 1 - z * z))
    return float(r * np.cos(p.theta / 2)), float(r * np.sin(p.theta / 2)), float(z)


def classify_poles(q: float, c2: float) -> dict[str, str]:
    """Stability of the polar (north) and rho0 = 0 (south) fixed points."""
    if c2 >= 0:
        raise ValueError("pole classification assumes ferromagnetic c2 < 0")
    g = abs(c2)
    return {
        "north": "unstable" if 0 < q < 2 * g else "stable",
        "south": "unstable" if -2 * g < q < 0 else "stable",
    }


def energy_contours(q: float, c2: float, n_rho: int = 101, n_theta: int = 181):
    """Energy on a (rho0, theta) grid; returns rho0 axis, theta axis, eps[rho, theta]."""
    if n_rho < 2 or n_theta < 2:
        raise ValueError("grid needs at least two points per axis")
    rho = np.linspace(0.0, 1.0, n_rho)
    theta = np.linspace(-np.pi, np.pi, n_theta)
    R, T = np.meshgrid(rho, theta, indexing="ij")
    return rho, theta, energy_surface(R, T, q, c2)


def contour_rows(q: float, c2: float, n_rho: int = 101, n_theta: int = 181):
    """Flattened (rho0, theta, eps) rows for CSV export."""
    rho, theta, eps = energy_contours(q, c2, n_rho, n_theta)
    R, T = np.meshgrid(rho, theta, indexing="ij")
    return np.column_stack([R.ravel(), T.ravel(), eps.ravel()])


def pole_growth_rate(q: float, c2: float, pole: str) -> float:
    """Largest real part of the linearized mean-field spectrum at a pole.

    The Jacobian is taken numerically from the noise- and loss-free
    stochastic drift in the frame where the pole is stationary.
    """
    from .twa import meanfield_drift

    N = 1000.0
    if pole == "north":
        psi = np.array([0.0, np.sqrt(N), 0.0], dtype=complex)
        omega = q
    elif pole == "south":
        psi = np.array([np.sqrt(N / 2), 0.0, np.sqrt(N / 2)], dtype=complex)
        omega = 0.0
    else:
        raise ValueError(f"unknown pole {pole!r}")

    def f(x):
        z = x[:3] + 1j * x[3:]
        dz = meanfield_drift(z[None, :], c2 / N, q)[0] - 1j * omega * z
        return np.concatenate([dz.real, dz.imag])

    x0 = np.concatenate([psi.real, psi.imag])
    if np.abs(f(x0)).max() > 1e-9 * N:
        raise RuntimeError("linearization point is not stationary")
    h = 1e-6
    J = np.empty((6, 6))
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        J[:, k] = (f(x0 + e) - f(x0 - e)) / (2 * h)
    return float(np.max(np.linalg.eigvals(J).real))
