"""Episode mechanics for q(t) control of a spin-1 condensate.

Two tasks share one environment:

* ``prepare``: start from the polar state after a quench to q = 1.5|c2| and
  steer towards a target (ground state of H(q_tg) or the polar state).
* ``readout``: start from a probe state, encode a family of small phases with
  exp(-i phi Lx), and shape the post-encoding dynamics so that rho0 becomes a
  sensitive phase meter.

Actions live in normalized units [-1, 1]: the first component scales the ramp
rate dq/dt to ``rate_bound`` |c2|^2, the optional second one sets the step
length in [0, 2 tau/M].  Internally q is in units of |c2| and time in 1/|c2|.
Rewards are terminal only.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import spin1, twa
from .metrology import gain_db, inverse_sensitivity, sql
from .profiles import ControlProfile

log = logging.getLogger(__name__)

TASKS = ("prepare", "readout")
REWARDS = ("sensitivity", "fidelity", "flipped_energy")
BACKENDS = ("exact", "twa")


@dataclass(frozen=True)
class TWABackendConfig:
    """Physical parameters for the semiclassical backend (SI units)."""

    c2_hz: float = -2.66
    gamma: float = 0.0
    gamma_c: float = 0.0
    omega0: float = 0.0
    dt: float = 1e-4
    n_traj: int = 500

    @property
    def c2_rad(self) -> float:
        return 2 * math.pi * self.c2_hz


@dataclass(frozen=True)
class EpisodeConfig:
    task: str = "readout"
    N: int = 50
    M: int = 20
    tau: float = 10.0
    tau3: float = 0.0
    rate_bound: float = 2.0
    variable_dt: bool = False
    q_start: float | None = None
    q_low: float | None = None
    q_high: float | None = None
    q_norm: float = 3.0
    reward: str = "sensitivity"
    reward_scale: str = "gain_db"
    sigma_n: float = 0.02
    phi_step: float = 2e-3
    phi_max: float = 0.04
    target: str = "ground"
    q_target: float = 0.0
    probe_q: float = 0.0
    backend: str = "exact"
    twa: TWABackendConfig = field(default_factory=TWABackendConfig)
    generation: ControlProfile | None = None
    track_gain: bool = False

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.reward not in REWARDS:
            raise ValueError(f"reward must be one of {REWARDS}")
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.sigma_n < 0 or self.tau < 0 or self.tau3 < 0:
            raise ValueError("sigma_n, tau and tau3 must be non-negative")
        if self.reward == "sensitivity" and self.task != "readout":
            raise ValueError("the sensitivity reward needs the readout task")
        if self.reward_scale not in ("gain_db", "raw"):
            raise ValueError("reward_scale must be 'gain_db' or 'raw'")
        if self.q_low is not None and self.q_high is not None and self.q_low > self.q_high:
            raise ValueError("q_low exceeds q_high")
        if self.phi_step <= 0 or self.phi_max < self.phi_step:
            raise ValueError("need 0 < phi_step <= phi_max")

    @property
    def act_dim(self) -> int:
        return 2 if self.variable_dt else 1

    @property
    def initial_q(self) -> float:
        if self.q_start is not None:
            return self.q_start
        return 1.5 if self.task == "prepare" else self.probe_q

    @property
    def dphi_sql(self) -> float:
        return sql(self.N, "three_mode")

    def phase_grid(self) -> np.ndarray:
        k = int(round(self.phi_max / self.phi_step))
        return np.arange(-k, k + 1) * self.phi_step


def sensitivity_on_grid(mean, std, step: float, sigma_n: float):
    """Inverse sensitivity at the interior points of a uniform phase grid."""
    mean = np.asarray(mean)
    slope = (mean[2:] - mean[:-2]) / (2 * step)
    return inverse_sensitivity(slope, np.asarray(std)[1:-1], sigma_n)


class ExactBackend:
    """Full quantum dynamics; the readout task carries one copy per grid phase."""

    def __init__(self, cfg: EpisodeConfig, probe: spin1.SpinorFockState | None = None):
        self.cfg = cfg
        self.basis = spin1.build_basis(cfg.N)
        self.evolver = spin1.BlockEvolver(self.basis, c2=-1.0)
        self._probe = probe
        self._target = None
        self.blocks: dict[int, np.ndarray] = {}

    def probe(self) -> spin1.SpinorFockState:
        if self._probe is None:
            self._probe = spin1.ground_state(spin1.SystemParams(self.cfg.N, -1.0, self.cfg.probe_q))
        return self._probe

    def target(self) -> spin1.SpinorFockState:
        if self._target is None:
            if self.cfg.target == "polar":
                self._target = spin1.polar_state(self.basis)
            else:
                self._target = spin1.ground_state(spin1.SystemParams(self.cfg.N, -1.0, self.cfg.q_target))
        return self._target

    def reset(self):
        if self.cfg.task == "readout":
            self.blocks = spin1.rotate_many(self.probe(), self.cfg.phase_grid())
            self.blocks = {m: a for m, a in self.blocks.items() if np.abs(a).max() > 1e-9}
            self.center = len(self.cfg.phase_grid()) // 2
        else:
            st = spin1.polar_state(self.basis)
            self.blocks = {m: a[:, None] for m, a in st.blocks.items()}
            self.center = 0

    def evolve(self, q: float, dt: float):
        self.blocks = self.evolver.propagate(self.blocks, q, dt)

    def moments(self):
        return spin1.block_moments(self.basis, self.blocks)

    def state(self, column: int | None = None) -> spin1.SpinorFockState:
        c = self.center if column is None else column
        return spin1.SpinorFockState(self.basis, {m: a[:, c].copy() for m, a in self.blocks.items()})

    def observation_moments(self):
        mo = self.moments()
        c = self.center
        N = self.cfg.N
        return mo["n0"][c] / N, mo["corr"][c]

    def rho0_curves(self):
        mo = self.moments()
        N = self.cfg.N
        mean = mo["n0"] / N
        var = np.maximum(mo["n0sq"] - mo["n0"] ** 2, 0.0) / N ** 2
        return mean, np.sqrt(var)

    def fidelity(self) -> float:
        return spin1.fidelity(self.state(), self.target())

    def flipped_energy(self) -> float:
        p = spin1.SystemParams(self.cfg.N, -1.0, self.cfg.q_target)
        return -spin1.energy(self.state(), p) / self.cfg.N


class TWABackend:
    """Semiclassical ensembles; one ensemble per grid phase with common noise."""

    def __init__(self, cfg: EpisodeConfig, seed: int = 0):
        self.cfg = cfg
        t = cfg.twa
        self.c2_abs = abs(t.c2_rad)
        self.tcfg = twa.TWAConfig(N0=cfg.N, c2=t.c2_rad, gamma=t.gamma, gamma_c=t.gamma_c,
                                  omega0=t.omega0, dt=t.dt, n_traj=t.n_traj, seed=seed)
        self.ensembles: list[twa.WignerEnsemble] = []

    def reseed(self, seed: int):
        self.tcfg = replace(self.tcfg, seed=int(seed))

    def reset(self):
        ens = twa.sample_polar_ensemble(self.tcfg)
        if self.cfg.task == "readout":
            if self.cfg.generation is not None:
                segs = [(q * self.c2_abs, d / self.c2_abs) for q, d in self.cfg.generation.segments]
                ens, _ = twa.run_profile(ens, segs)
            self.ensembles = [twa.encode_phase_meanfield(ens, phi) for phi in self.cfg.phase_grid()]
            self.center = len(self.ensembles) // 2
        else:
            self.ensembles = [ens]
            self.center = 0

    def evolve(self, q: float, dt: float):
        qp, tp = q * self.c2_abs, dt / self.c2_abs
        self.ensembles = [twa.run_segment(e, qp, tp) for e in self.ensembles]

    def observation_moments(self):
        o = twa.ensemble_observables(self.ensembles[self.center])
        return o.mean_rho0, o.correlator / (self.ensembles[self.center].N / self.cfg.N) ** 2

    def rho0_curves(self):
        obs = [twa.ensemble_observables(e) for e in self.ensembles]
        return np.array([o.mean_rho0 for o in obs]), np.array([o.std_rho0 for o in obs])

    def flipped_energy(self) -> float:
        e = self.ensembles[self.center]
        return -twa.mean_energy(e, self.cfg.q_target * abs(e.c2)) / (e.N * abs(e.c2))

    def fidelity(self) -> float:
        raise NotImplementedError("fidelity needs the exact backend")


class SpinorEnv:
    """Gym-style environment: ``reset() -> obs``, ``step(a) -> (obs, r, done, info)``."""

    obs_dim = 4

    def __init__(self, cfg: EpisodeConfig, probe: spin1.SpinorFockState | None = None):
        self.cfg = cfg
        if cfg.backend == "exact":
            self.backend = ExactBackend(cfg, probe)
        else:
            self.backend = TWABackend(cfg)
        self.act_dim = cfg.act_dim
        self.q = cfg.initial_q
        self.t = 0.0
        self.j = 0
        self.history: list[dict] = []
        self.segments: list[tuple[float, float]] = []
        self.clamp_events = 0

    def seed(self, seed: int):
        if isinstance(self.backend, TWABackend):
            self.backend.reseed(seed)

    def _clip_q(self, q):
        lo, hi = self.cfg.q_low, self.cfg.q_high
        if lo is not None:
            q = max(lo, q)
        if hi is not None:
            q = min(hi, q)
        return q

    def observation(self) -> np.ndarray:
        rho0, corr = self.backend.observation_moments()
        N = self.cfg.N
        return np.array([rho0, np.angle(corr), abs(corr) / N ** 2, self.q / self.cfg.q_norm])

    def _record(self):
        rec = {"t": self.t, "q": self.q, "rho0": self.backend.observation_moments()[0]}
        if self.cfg.track_gain and self.cfg.task == "readout":
            rec["gain_db"] = self.current_gain_db()
        self.history.append(rec)

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.seed(seed)
        self.q = self._clip_q(self.cfg.initial_q)
        self.t = 0.0
        self.j = 0
        self.segments = []
        self.history = []
        self.backend.reset()
        self._record()
        return self.observation()

    def decode_action(self, action) -> tuple[float, float]:
        a = np.atleast_1d(np.asarray(action, dtype=float))
        if a.shape[0] != self.act_dim:
            raise ValueError(f"expected action of length {self.act_dim}")
        clipped = np.clip(a, -1.0, 1.0)
        if np.any(clipped != a):
            self.clamp_events += 1
            log.debug("action %s clamped to %s", a, clipped)
        rate = clipped[0] * self.cfg.rate_bound
        if self.cfg.variable_dt:
            dt = (clipped[1] + 1.0) / 2.0 * 2.0 * self.cfg.tau / self.cfg.M
        else:
            dt = self.cfg.tau / self.cfg.M
        return rate, dt

    def step(self, action):
        if self.j >= self.cfg.M:
            raise RuntimeError("episode finished; call reset()")
        rate, dt = self.decode_action(action)
        self.apply(self._clip_q(self.q + rate * dt), dt)
        done = self.j >= self.cfg.M
        reward = 0.0
        if done:
            if self.cfg.tau3 > 0:
                self.apply(self.q, self.cfg.tau3, count=False)
            reward = self.terminal_reward()
        return self.observation(), reward, done, {"q": self.q, "t": self.t, "rate": rate, "dt": dt}

    def apply(self, q: float, dt: float, count: bool = True):
        """Set q and evolve for dt (used by step and by fixed-profile replays)."""
        self.q = q
        if dt > 0:
            self.backend.evolve(q, dt)
        self.t += dt
        self.segments.append((q, dt))
        if count:
            self.j += 1
        self._record()

    def rho0_sensitivity(self) -> np.ndarray:
        mean, std = self.backend.rho0_curves()
        return sensitivity_on_grid(mean, std, self.cfg.phi_step, self.cfg.sigma_n)

    def current_gain_db(self) -> float:
        f = np.max(self.rho0_sensitivity())
        return gain_db(1.0 / f if f > 0 else np.inf, self.cfg.N)

    def terminal_reward(self) -> float:
        kind = self.cfg.reward
        if kind == "sensitivity":
            f = float(np.max(self.rho0_sensitivity()))
            if self.cfg.reward_scale == "raw":
                return f
            return gain_db(1.0 / f if f > 0 else np.inf, self.cfg.N)
        if kind == "fidelity":
            return self.backend.fidelity()
        return self.backend.flipped_energy()

    def profile(self) -> ControlProfile:
        return ControlProfile(segments=tuple(self.segments),
                              tau2=sum(d for _, d in self.segments[: self.cfg.M]),
                              tau3=self.cfg.tau3 or None)


def reward_sensitivity(mean, std, phi_step: float, sigma_n: float) -> float:
    """max over the grid of |d<rho0>/dphi| / sqrt(Var rho0 + sigma_n^2)."""
    return float(np.max(sensitivity_on_grid(mean, std, phi_step, sigma_n)))


def reward_fidelity(state: spin1.SpinorFockState, target: spin1.SpinorFockState) -> float:
    return spin1.fidelity(state, target)


def reward_flipped_energy(state: spin1.SpinorFockState, q_target: float, c2: float = -1.0) -> float:
    """-<H(q_tg)>/(N |c2|)."""
    p = spin1.SystemParams(state.N, c2, q_target)
    return -spin1.energy(state, p) / (state.N * abs(c2))


def replay(env: SpinorEnv, profile: ControlProfile):
    """Run a fixed q profile through a fresh episode; returns the env after it."""
    env.reset()
    for q, d in profile.segments:
        env.apply(env._clip_q(q), d)
    return env


def epoch_scatter(policy, env: SpinorEnv, n_samples: int, seed: int = 0, tag: int = 0) -> np.ndarray:
    """(max rho0, max gain in dB) over each of ``n_samples`` stochastic readout episodes.

    Episode ``k`` uses the noise stream ``SeedSequence([seed, tag, k])``.
    """
    from .ppo import episode_rng, run_episode

    if env.cfg.task != "readout":
        raise ValueError("epoch_scatter needs the readout task")
    env.cfg = replace(env.cfg, track_gain=True)
    out = np.empty((n_samples, 2))
    for k in range(n_samples):
        rng = episode_rng(seed, tag, k)
        run_episode(policy, env, rng)
        out[k] = (max(h["rho0"] for h in env.history), max(h["gain_db"] for h in env.history))
    return out
