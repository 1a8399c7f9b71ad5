"""One-axis twisting of N spin-1/2 particles in the symmetric (Dicke) subspace.

H = chi Jz^2 + Omega Jx with chi = 1 setting the time unit.  States are
amplitude vectors over m = -j..j.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.special import gammaln

from .metrology import SensitivityReport, fd_angles, gain_db, report_from_triplets
from .profiles import ControlProfile


@dataclass(frozen=True, eq=False)
class DickeState:
    amps: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.amps, dtype=complex)
        if a.ndim != 1 or a.size < 2:
            raise ValueError("amplitudes must be a vector of length N+1 >= 2")
        if abs(np.vdot(a, a).real - 1) > 1e-9:
            raise ValueError("state is not normalized")
        object.__setattr__(self, "amps", a)

    @property
    def N(self) -> int:
        return self.amps.size - 1

    @property
    def j(self) -> float:
        return self.N / 2


def m_values(N: int) -> np.ndarray:
    return np.arange(N + 1) - N / 2


def _jplus_coeffs(N: int) -> np.ndarray:
    """<m+1|J+|m> for m = -j..j-1."""
    j, m = N / 2, m_values(N)[:-1]
    return np.sqrt(j * (j + 1) - m * (m + 1))


def spin_ops(N: int):
    """Dense Jx, Jy, Jz (for moments and tests)."""
    c = _jplus_coeffs(N)
    jp = np.diag(c, -1).astype(complex)
    return (jp + jp.T) / 2, (jp - jp.T.conj()) / 2j, np.diag(m_values(N)).astype(complex)


def css_x(N: int) -> DickeState:
    """All spins along +x: c_m = 2^-j sqrt(binom(2j, j+m))."""
    k = np.arange(N + 1)
    logc = 0.5 * (gammaln(N + 1) - gammaln(k + 1) - gammaln(N - k + 1)) - 0.5 * N * np.log(2)
    return DickeState(np.exp(logc).astype(complex))


def dicke(N: int, m: float) -> DickeState:
    a = np.zeros(N + 1, complex)
    a[int(round(m + N / 2))] = 1.0
    return DickeState(a)


def twin_fock(N: int) -> DickeState:
    if N % 2:
        raise ValueError("twin-Fock state needs even N")
    return dicke(N, 0)


@lru_cache(maxsize=256)
def _oat_eig(N: int, chi: float, omega: float):
    return eigh_tridiagonal(chi * m_values(N) ** 2, 0.5 * omega * _jplus_coeffs(N))


def oat_propagate(amps: np.ndarray, chi: float, omega: float, duration: float) -> np.ndarray:
    """exp(-i t (chi Jz^2 + Omega Jx)) on amplitude arrays of shape (N+1,) or (N+1, K)."""
    if not np.isfinite(duration) or duration < 0:
        raise ValueError("duration must be finite and non-negative")
    w, v = _oat_eig(amps.shape[0] - 1, float(chi), float(omega))
    ph = np.exp(-1j * w * duration)
    ph = ph[:, None] if amps.ndim == 2 else ph
    return v @ (ph * (v.T @ amps))


def oat_evolve(state: DickeState, chi: float, omega: float, duration: float) -> DickeState:
    out = oat_propagate(state.amps, chi, omega, duration)
    return DickeState(out / np.linalg.norm(out))


def run_profile(amps: np.ndarray, profile: ControlProfile, chi: float = 1.0) -> np.ndarray:
    """Apply (Omega, duration) segments; ``interaction_sign`` -1 flips chi."""
    for om, d in profile.segments:
        amps = oat_propagate(amps, profile.interaction_sign * chi, om, d)
    return amps


@lru_cache(maxsize=32)
def _jx_eig(N: int):
    return eigh_tridiagonal(np.zeros(N + 1), 0.5 * _jplus_coeffs(N))


def rotate_about_Jy_many(amps: np.ndarray, phis) -> np.ndarray:
    """exp(-i phi Jy) for each phi; returns (N+1, K).

    Uses Jy = Rz Jx Rz^dagger with Rz = exp(-i pi/2 Jz).
    """
    N = amps.shape[0] - 1
    w, v = _jx_eig(N)
    rz = np.exp(-0.5j * np.pi * m_values(N))
    x = v.T @ (rz.conj() * amps)
    ph = np.exp(-1j * np.outer(w, np.asarray(phis, dtype=float)))
    return rz[:, None] * (v @ (ph * x[:, None]))


def rotate_about_Jy(state: DickeState, phi: float) -> DickeState:
    return DickeState(rotate_about_Jy_many(state.amps, [phi])[:, 0])


def moments(amps: np.ndarray) -> dict:
    """Expectations batched over trailing columns."""
    a = amps if amps.ndim == 2 else amps[:, None]
    N = a.shape[0] - 1
    m = m_values(N)[:, None]
    c = _jplus_coeffs(N)[:, None]
    p = np.abs(a) ** 2
    # <J+> = sum_m c_m conj(a_{m+1}) a_m
    jp = np.sum(c * a[1:].conj() * a[:-1], axis=0)
    # <J+^2> = sum_m c_m c_{m+1} conj(a_{m+2}) a_m
    jp2 = np.sum(c[:-1] * c[1:] * a[2:].conj() * a[:-2], axis=0)
    # <J+ Jz + Jz J+> = sum c_m (2m+1) conj(a_{m+1}) a_m
    jpz = np.sum(c * (2 * m[:-1] + 1) * a[1:].conj() * a[:-1], axis=0)
    j = N / 2
    jz2 = np.sum(p * m ** 2, axis=0)
    jpjm = j * (j + 1) - jz2  # <J+J- + J-J+>/2 = <J^2 - Jz^2>
    out = {
        "jx": jp.real,
        "jy": jp.imag,
        "jz": np.sum(p * m, axis=0),
        "jz2": jz2,
        "jx2": 0.5 * (jp2.real + jpjm),
        "jy2": 0.5 * (-jp2.real + jpjm),
        "jyjz": jpz.imag,
        "jxjz": jpz.real,
        "jxjy": jp2.imag,
    }
    if amps.ndim == 1:
        out = {k: float(v[0]) for k, v in out.items()}
    return out


def observation(amps: np.ndarray) -> np.ndarray:
    """(<Jx>/j, <Jx^2>/j^2, <Jy^2>/j^2, <JyJz+JzJy>/j^2)."""
    mo = moments(amps)
    j = (amps.shape[0] - 1) / 2
    return np.array([mo["jx"] / j, mo["jx2"] / j ** 2, mo["jy2"] / j ** 2, mo["jyjz"] / j ** 2])


def fidelity(a: DickeState, b: DickeState) -> float:
    return float(abs(np.vdot(a.amps, b.amps)))


def _detector(amps, observable: str):
    mo = moments(amps)
    if observable == "Jy":
        return mo["jy"], np.sqrt(np.maximum(mo["jy2"] - mo["jy"] ** 2, 0.0))
    if observable == "Jz":
        return mo["jz"], np.sqrt(np.maximum(mo["jz2"] - mo["jz"] ** 2, 0.0))
    raise ValueError("observable must be 'Jy' or 'Jz'")


def sensitivity_Jy(probe: DickeState, readout: ControlProfile | None, phis, fd_step: float = 1e-4,
                   sigma_n: float = 0.0, observable: str = "Jy") -> SensitivityReport:
    """Rotate about Jy, run the Omega readout, measure ``observable`` (Jy by default)."""
    phis = np.asarray(phis, dtype=float)
    a = rotate_about_Jy_many(probe.amps, fd_angles(phis, fd_step))
    if readout is not None:
        a = run_profile(a, readout)
    mean, std = _detector(a, observable)
    return report_from_triplets(phis, mean, std, N=probe.N, sigma_n_eff=sigma_n, step=fd_step,
                                detector=observable, sigma_n=sigma_n, sql_kind="two_mode")


def generate_probe(N: int = 100, chi: float = 1.0, omega: float = 1.0, tau: float = 0.15) -> DickeState:
    return oat_evolve(css_x(N), chi, omega, tau)


def readout_phase_grid(phi_max: float = 0.1, n: int = 21) -> np.ndarray:
    return np.linspace(0.0, phi_max, n)


@dataclass(frozen=True)
class SpinHalfConfig:
    """Episode settings; ``task`` is 'readout' (Jy gain reward) or 'twinfock' (fidelity reward)."""

    task: str = "readout"
    N: int = 100
    steps: int = 10
    duration: float = 0.15
    omega_bound: float = 30.0
    gen_tau: float = 0.15
    gen_omega: float = 1.0
    interaction_sign: int = 1
    phi_max: float = 0.1
    n_phi: int = 21
    fd_step: float = 1e-4
    sigma_n: float = 0.0
    track: bool = False

    def __post_init__(self):
        if self.task not in ("readout", "twinfock"):
            raise ValueError("task must be 'readout' or 'twinfock'")
        if self.N < 1 or self.steps < 1 or self.duration < 0 or self.omega_bound <= 0:
            raise ValueError("need N >= 1, steps >= 1, duration >= 0, omega_bound > 0")
        if self.task == "twinfock" and self.N % 2:
            raise ValueError("twin-Fock target needs even N")

    @classmethod
    def twinfock(cls, N: int = 50, chi_tau: float = 2.0, **kw) -> "SpinHalfConfig":
        return cls(task="twinfock", N=N, duration=chi_tau, **kw)


class SpinHalfEnv:
    """Omega(t) control with the same reset/step/profile interface as the spin-1 environment.

    The action in [-1, 1] is Omega / omega_bound, held for duration/steps.
    For readout, column 0 is the unencoded probe and the rest are the
    phase-encoded copies needed for central differences.
    """

    obs_dim = 4
    act_dim = 1

    def __init__(self, cfg: SpinHalfConfig = SpinHalfConfig()):
        self.cfg = cfg
        self.clamp_events = 0
        if cfg.task == "readout":
            self.probe = generate_probe(cfg.N, 1.0, cfg.gen_omega, cfg.gen_tau)
            self.phis = readout_phase_grid(cfg.phi_max, cfg.n_phi)
            self._start = np.column_stack([self.probe.amps,
                                           rotate_about_Jy_many(self.probe.amps, fd_angles(self.phis, cfg.fd_step))])
        else:
            self.target = twin_fock(cfg.N)
            self._start = css_x(cfg.N).amps[:, None]
        self.reset()

    def reset(self, seed=None) -> np.ndarray:
        self.amps = self._start.copy()
        self.t, self.j = 0.0, 0
        self.segments: list[tuple[float, float]] = []
        self.history: list[dict] = []
        self._record()
        return self.observation()

    def observation(self) -> np.ndarray:
        return observation(self.amps[:, 0])

    def score(self) -> float:
        if self.cfg.task == "twinfock":
            return float(abs(np.vdot(self.target.amps, self.amps[:, 0])))
        mean, std = _detector(self.amps[:, 1:], "Jy")
        r = report_from_triplets(self.phis, mean, std, N=self.cfg.N, sigma_n_eff=self.cfg.sigma_n,
                                 step=self.cfg.fd_step, detector="Jy", sigma_n=self.cfg.sigma_n, sql_kind="two_mode")
        return r.best_gain_db

    def _record(self):
        rec = {"t": self.t, "omega": self.segments[-1][0] if self.segments else None}
        if self.cfg.track:
            rec["score"] = self.score()
        self.history.append(rec)

    def step(self, action):
        if self.j >= self.cfg.steps:
            raise RuntimeError("episode finished; call reset()")
        a = float(np.atleast_1d(action)[0])
        if not -1 <= a <= 1:
            self.clamp_events += 1
            a = min(max(a, -1.0), 1.0)
        om = a * self.cfg.omega_bound
        self.apply(om, self.cfg.duration / self.cfg.steps)
        done = self.j >= self.cfg.steps
        return self.observation(), (self.score() if done else 0.0), done, {"omega": om, "t": self.t}

    def apply(self, omega: float, dt: float):
        self.amps = oat_propagate(self.amps, self.cfg.interaction_sign, omega, dt)
        self.t += dt
        self.j += 1
        self.segments.append((omega, dt))
        self._record()

    def profile(self) -> ControlProfile:
        return ControlProfile(segments=tuple(self.segments), interaction_sign=self.cfg.interaction_sign)

    def evaluate(self, omegas) -> float:
        """Objective for black-box optimizers: terminal score of a full Omega vector."""
        self.reset()
        dt = self.cfg.duration / self.cfg.steps
        for om in omegas:
            self.apply(float(om), dt)
        return self.score()


def score_along(env: SpinHalfEnv, profile: ControlProfile) -> tuple[np.ndarray, np.ndarray]:
    """Replay a profile (with its interaction sign) and return times and the score after each segment."""
    env.reset()
    ts, scores = [0.0], [env.score()]
    for om, d in profile.segments:
        env.amps = oat_propagate(env.amps, profile.interaction_sign, om, d)
        env.t += d
        ts.append(env.t)
        scores.append(env.score())
    return np.array(ts), np.array(scores)
