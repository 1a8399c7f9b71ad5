"""Run configuration: schema, YAML loading, presets and unit conversion.

Spin-1 configs are written in physical units (Hz for c2 and q, seconds for
durations, s^-1 for loss rates).  Everything downstream works in units where
|c2| = 1; the conversion lives in this module only.  Spin-1/2 configs are
already dimensionless (chi = 1).

A complete annotated example is ``configs/paper-small.yaml`` in the
repository; ``nlreadout show-config --preset NAME`` prints any preset.
"""
from __future__ import annotations

import math
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .env import EpisodeConfig, TWABackendConfig
from .ppo import HIDDEN, TrainerConfig
from .profiles import ControlProfile
from .spinhalf import SpinHalfConfig
from .twa import SQRT_MHZ, TWAConfig


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class Physics(Strict):
    N: int = Field(50, ge=1)
    c2_hz: float = -2.66
    gamma: float = Field(0.0, ge=0)
    gamma_c: float = Field(0.0, ge=0)
    omega0: float = Field(0.0, ge=0, description="RF noise amplitude in rad s^-1/2")

    @field_validator("c2_hz")
    @classmethod
    def _negative(cls, v):
        if v >= 0:
            raise ValueError("c2_hz must be negative (ferromagnetic interaction)")
        return v

    @property
    def c2_rad(self) -> float:
        return 2 * math.pi * self.c2_hz

    def q_units(self, q_hz: float) -> float:
        return q_hz / abs(self.c2_hz)

    def t_units(self, t_s: float) -> float:
        return t_s * abs(self.c2_rad)


class TWASettings(Strict):
    dt: float = Field(1e-4, gt=0)
    n_traj: int = Field(1000, ge=2)
    chunk_size: int = Field(256, ge=1)


class Episode(Strict):
    task: Literal["prepare", "readout"] = "readout"
    M: int = Field(20, ge=1)
    tau_s: float = Field(10 / (2 * math.pi * 2.66), ge=0)
    tau3_s: float = Field(0.0, ge=0)
    rate_bound: float = Field(2.0, gt=0, description="max |dq/dt| in units of |c2|^2")
    variable_dt: bool = False
    q_start_hz: float | None = None
    q_low_hz: float | None = None
    q_high_hz: float | None = None
    q_norm_hz: float = Field(3 * 2.66, gt=0)
    reward: Literal["sensitivity", "fidelity", "flipped_energy"] = "sensitivity"
    reward_scale: Literal["gain_db", "raw"] = "gain_db"
    sigma_n: float = Field(0.02, ge=0)
    phi_step: float = Field(2e-3, gt=0)
    phi_max: float = Field(0.04, gt=0)
    target: Literal["ground", "polar"] = "ground"
    q_target_hz: float = 0.0
    probe_q_hz: float = 0.0
    generation: list[tuple[float, float]] | None = Field(None, description="(q_hz, seconds) segments before readout")


class SpinHalf(Strict):
    task: Literal["readout", "twinfock"] = "readout"
    N: int = Field(100, ge=1)
    steps: int = Field(10, ge=1)
    duration: float = Field(0.15, ge=0, description="chi * t")
    omega_bound: float = Field(30.0, gt=0)
    gen_tau: float = Field(0.15, ge=0)
    gen_omega: float = 1.0
    interaction_sign: Literal[1, -1] = 1
    phi_max: float = Field(0.1, gt=0)
    n_phi: int = Field(21, ge=1)
    fd_step: float = Field(1e-4, gt=0)
    sigma_n: float = Field(0.0, ge=0)


class Trainer(Strict):
    clip: float = Field(0.2, gt=0, lt=1)
    gamma: float = Field(0.99, gt=0, le=1)
    lam: float = Field(0.97, ge=0, le=1)
    lr_actor: float = Field(3e-4, gt=0)
    lr_critic: float = Field(1e-3, gt=0)
    update_epochs: int = Field(4, ge=1)
    minibatch_size: int = Field(64, ge=1)
    episodes_per_epoch: int = Field(16, ge=1)
    epochs: int = Field(300, ge=0)
    init_log_sigma: float = math.log(0.3)
    entropy_coef: float = 0.0
    hidden: tuple[int, ...] = HIDDEN
    snapshot_epochs: tuple[int, ...] = (0, 10, 100)


class Scan(Strict):
    probe: Literal["ground", "polar"] = "ground"
    probe_q_hz: float = 0.0
    detector: Literal["rho0", "Lz2"] = "rho0"
    sigma_n: float = Field(0.0, ge=0)
    phi_start: float = 1e-3
    phi_stop: float = 0.1
    n_phi: int = Field(100, ge=1)
    fd_step: float = Field(1e-4, gt=0)


class Simulate(Strict):
    segments: list[tuple[float, float]] = Field(default_factory=list, description="(q_hz, seconds)")
    record_every_s: float | None = Field(None, gt=0)


class Baseline(Strict):
    method: Literal["sa", "cma", "tr"] = "cma"
    budget: int = Field(3000, ge=1)
    trials: int = Field(1, ge=1)


class Scatter(Strict):
    n_samples: int = Field(2000, ge=1)


class RunConfig(Strict):
    system: Literal["spin1", "spinhalf"] = "spin1"
    seed: int = Field(0, ge=0, lt=2 ** 64)
    workers: int = Field(1, ge=1)
    backend: Literal["exact", "twa"] = "exact"
    physics: Physics = Physics()
    twa: TWASettings = TWASettings()
    episode: Episode = Episode()
    spinhalf: SpinHalf = SpinHalf()
    trainer: Trainer = Trainer()
    scan: Scan = Scan()
    simulate: Simulate = Simulate()
    baseline: Baseline = Baseline()
    scatter: Scatter = Scatter()

    @model_validator(mode="after")
    def _consistent(self):
        e = self.episode
        if e.phi_max < e.phi_step:
            raise ValueError("episode.phi_max must be >= episode.phi_step")
        if e.reward == "sensitivity" and e.task != "readout":
            raise ValueError("the sensitivity reward needs the readout task")
        if self.system == "spinhalf" and self.spinhalf.task == "twinfock" and self.spinhalf.N % 2:
            raise ValueError("twin-Fock target needs even N")
        return self

    # --- conversions into core objects ------------------------------------

    def twa_config(self, n_traj: int | None = None) -> TWAConfig:
        p = self.physics
        return TWAConfig(N0=p.N, c2=p.c2_rad, gamma=p.gamma, gamma_c=p.gamma_c, omega0=p.omega0,
                         dt=self.twa.dt, n_traj=n_traj or self.twa.n_traj, seed=self.seed,
                         chunk_size=self.twa.chunk_size)

    def to_units(self, segments) -> list[tuple[float, float]]:
        p = self.physics
        return [(p.q_units(q), p.t_units(d)) for q, d in segments]

    def episode_config(self, **overrides) -> EpisodeConfig:
        p, e = self.physics, self.episode
        opt = lambda v: None if v is None else p.q_units(v)  # noqa: E731
        gen = None
        if e.generation:
            gen = ControlProfile(segments=tuple(self.to_units(e.generation)))
        kw = dict(
            task=e.task, N=p.N, M=e.M, tau=p.t_units(e.tau_s), tau3=p.t_units(e.tau3_s),
            rate_bound=e.rate_bound, variable_dt=e.variable_dt, q_start=opt(e.q_start_hz),
            q_low=opt(e.q_low_hz), q_high=opt(e.q_high_hz), q_norm=p.q_units(e.q_norm_hz),
            reward=e.reward, reward_scale=e.reward_scale, sigma_n=e.sigma_n, phi_step=e.phi_step,
            phi_max=e.phi_max, target=e.target, q_target=p.q_units(e.q_target_hz),
            probe_q=p.q_units(e.probe_q_hz), backend=self.backend,
            twa=TWABackendConfig(c2_hz=p.c2_hz, gamma=p.gamma, gamma_c=p.gamma_c, omega0=p.omega0,
                                 dt=self.twa.dt, n_traj=self.twa.n_traj),
            generation=gen,
        )
        kw.update(overrides)
        return EpisodeConfig(**kw)

    def spinhalf_config(self, **overrides) -> SpinHalfConfig:
        return SpinHalfConfig(**{**self.spinhalf.model_dump(), **overrides})

    def trainer_config(self) -> TrainerConfig:
        t = self.trainer.model_dump()
        t.pop("snapshot_epochs")
        return TrainerConfig(**t, seed=self.seed, workers=self.workers)


C2_HZ = -2.66
_T_UNIT = 1 / (2 * math.pi * 2.66)

PRESETS: dict[str, dict] = {
    "paper-small": {
        "system": "spin1",
        "physics": {"N": 50, "c2_hz": C2_HZ},
        "episode": {"task": "readout", "sigma_n": 0.02, "variable_dt": True,
                    "q_low_hz": -3 * 2.66, "q_high_hz": 3 * 2.66},
    },
    "paper-exp": {
        "system": "spin1",
        "backend": "twa",
        "physics": {"N": 10900, "c2_hz": C2_HZ, "gamma": 0.035, "gamma_c": 0.042,
                    "omega0": 2 * math.pi * 0.006 * SQRT_MHZ},
        "twa": {"dt": 1e-4, "n_traj": 1000},
        "episode": {"task": "prepare", "reward": "flipped_energy", "q_target_hz": 0.0,
                    "tau_s": 1.2, "M": 20},
    },
    "spinhalf-readout": {
        "system": "spinhalf",
        "spinhalf": {"task": "readout", "N": 100, "steps": 10, "duration": 0.15, "omega_bound": 30.0},
    },
    "spinhalf-twinfock": {
        "system": "spinhalf",
        "spinhalf": {"task": "twinfock", "N": 50, "steps": 10, "duration": 2.0, "omega_bound": 30.0},
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(path=None, preset: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Preset (if any) overlaid by the YAML file (if any) overlaid by ``overrides``."""
    data: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        data = _merge(data, PRESETS[preset])
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text())
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ValueError("config file must contain a mapping at top level")
        data = _merge(data, loaded)
    if overrides:
        data = _merge(data, overrides)
    return RunConfig.model_validate(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True)
