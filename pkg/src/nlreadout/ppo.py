"""Proximal policy optimization with residual MLP actor and critic.

Everything runs in float64 on the CPU.  Episode ``k`` of epoch ``e`` draws its
exploration noise and environment seed from ``SeedSequence([seed, e, k])``, so
learning curves depend on the seed only, never on how many workers collected
the rollouts.
"""
from __future__ import annotations

import io
import json
import logging
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .profiles import ControlProfile

log = logging.getLogger(__name__)

DTYPE = torch.float64
CHECKPOINT_MAGIC = b"NLRPOLICY\x00"
CHECKPOINT_VERSION = 1
HIDDEN = (64, 32, 16, 8)


class ResidualMLP(nn.Module):
    """tanh MLP in which every hidden layer adds a linear projection of its input."""

    def __init__(self, in_dim: int = 4, out_dim: int = 1, hidden=HIDDEN):
        super().__init__()
        widths = [in_dim, *hidden]
        self.layers = nn.ModuleList(nn.Linear(a, b, dtype=DTYPE) for a, b in zip(widths[:-1], widths[1:]))
        self.skips = nn.ModuleList(nn.Linear(a, b, bias=False, dtype=DTYPE) for a, b in zip(widths[:-1], widths[1:]))
        self.head = nn.Linear(widths[-1], out_dim, dtype=DTYPE)
        self.in_dim, self.out_dim, self.hidden = in_dim, out_dim, tuple(hidden)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for lin, skip in zip(self.layers, self.skips):
            x = torch.tanh(lin(x)) + skip(x)
        return self.head(x)


class GaussianPolicy(nn.Module):
    """Diagonal Gaussian with state-independent log standard deviation."""

    def __init__(self, obs_dim: int = 4, act_dim: int = 1, hidden=HIDDEN, init_log_sigma: float = math.log(0.3)):
        super().__init__()
        self.mean = ResidualMLP(obs_dim, act_dim, hidden)
        self.log_sigma = nn.Parameter(torch.full((act_dim,), float(init_log_sigma), dtype=DTYPE))

    @property
    def act_dim(self) -> int:
        return self.mean.out_dim

    def log_prob(self, obs: torch.Tensor, act: torch.Tensor) -> torch.Tensor:
        mu = self.mean(obs)
        z = (act - mu) / torch.exp(self.log_sigma)
        return (-0.5 * z ** 2 - self.log_sigma - 0.5 * math.log(2 * math.pi)).sum(-1)

    def act_mean(self, obs) -> np.ndarray:
        with torch.no_grad():
            return self.mean(torch.as_tensor(np.asarray(obs, dtype=float), dtype=DTYPE)).numpy()


def gaussian_log_prob(action, mu, log_sigma) -> float:
    a, mu, ls = (np.asarray(v, dtype=float) for v in (action, mu, log_sigma))
    return float(np.sum(-0.5 * ((a - mu) / np.exp(ls)) ** 2 - ls - 0.5 * math.log(2 * math.pi)))


def policy_sample(policy: GaussianPolicy, state, rng: np.random.Generator):
    """Draw a ~ N(mu(s), sigma^2); the log-probability is for the unclamped draw."""
    mu = policy.act_mean(state)
    ls = policy.log_sigma.detach().numpy()
    a = mu + np.exp(ls) * rng.standard_normal(mu.shape)
    return a, gaussian_log_prob(a, mu, ls)


def compute_gae(rewards, values, gamma: float, lam: float, last_value: float = 0.0):
    """Generalized advantage estimates and returns for one trajectory.

    ``values[t]`` is V(s_t); ``last_value`` is V(s_T) (0 for a terminal state).
    """
    r = np.asarray(rewards, dtype=float)
    v = np.append(np.asarray(values, dtype=float), last_value)
    adv = np.zeros_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        delta = r[t] + gamma * v[t + 1] - v[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
    return adv, adv + v[:-1]


def clipped_surrogate(ratio, adv, clip: float):
    """Per-sample min(ratio A, clip(ratio, 1-eps, 1+eps) A); works on arrays or tensors."""
    if isinstance(ratio, torch.Tensor):
        return torch.min(ratio * adv, torch.clamp(ratio, 1 - clip, 1 + clip) * adv)
    ratio, adv = np.asarray(ratio, dtype=float), np.asarray(adv, dtype=float)
    return np.minimum(ratio * adv, np.clip(ratio, 1 - clip, 1 + clip) * adv)


@dataclass
class Batch:
    obs: torch.Tensor
    act: torch.Tensor
    logp: torch.Tensor
    adv: torch.Tensor
    ret: torch.Tensor

    def __len__(self):
        return self.obs.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(self.obs[idx], self.act[idx], self.logp[idx], self.adv[idx], self.ret[idx])

    @classmethod
    def from_numpy(cls, obs, act, logp, adv, ret, normalize: bool = True) -> "Batch":
        adv = np.asarray(adv, dtype=float)
        if normalize and adv.size > 1:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        t = lambda x: torch.as_tensor(np.asarray(x, dtype=float), dtype=DTYPE)  # noqa: E731
        act = np.asarray(act, dtype=float)
        return cls(t(obs), t(act.reshape(len(act), -1)), t(logp), t(adv), t(ret))


def actor_loss(policy: GaussianPolicy, batch: Batch, clip: float, entropy_coef: float = 0.0) -> torch.Tensor:
    ratio = torch.exp(policy.log_prob(batch.obs, batch.act) - batch.logp)
    loss = -clipped_surrogate(ratio, batch.adv, clip).mean()
    if entropy_coef:
        loss = loss - entropy_coef * policy.log_sigma.sum()
    return loss


def critic_loss(critic: ResidualMLP, batch: Batch) -> torch.Tensor:
    return ((critic(batch.obs).squeeze(-1) - batch.ret) ** 2).mean()


@dataclass(frozen=True)
class TrainerConfig:
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.97
    lr_actor: float = 3e-4
    lr_critic: float = 1e-3
    update_epochs: int = 4
    minibatch_size: int = 64
    episodes_per_epoch: int = 16
    epochs: int = 300
    seed: int = 0
    init_log_sigma: float = math.log(0.3)
    entropy_coef: float = 0.0
    hidden: tuple[int, ...] = HIDDEN
    workers: int = 1

    def __post_init__(self):
        if not 0 < self.clip < 1:
            raise ValueError("clip must lie in (0, 1)")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0 <= self.lam <= 1:
            raise ValueError("lambda must lie in [0, 1]")
        if min(self.update_epochs, self.minibatch_size, self.episodes_per_epoch, self.workers) < 1:
            raise ValueError("update_epochs, minibatch_size, episodes_per_epoch and workers must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def ppo_update(policy, critic, opt_actor, opt_critic, batch: Batch, cfg: TrainerConfig, gen: torch.Generator) -> dict:
    """Several passes of minibatch Adam steps on the clipped objective and the value error."""
    stats = {"actor_loss": 0.0, "critic_loss": 0.0, "n": 0}
    n = len(batch)
    for _ in range(cfg.update_epochs):
        perm = torch.randperm(n, generator=gen)
        for s in range(0, n, cfg.minibatch_size):
            mb = batch.subset(perm[s:s + cfg.minibatch_size])
            la = actor_loss(policy, mb, cfg.clip, cfg.entropy_coef)
            lc = critic_loss(critic, mb)
            if not (torch.isfinite(la) and torch.isfinite(lc)):
                raise FloatingPointError(
                    f"non-finite loss (actor {la.item()}, critic {lc.item()}, log_sigma "
                    f"{policy.log_sigma.detach().numpy()}, |adv|max {mb.adv.abs().max().item()})")
            opt_actor.zero_grad()
            la.backward()
            opt_actor.step()
            opt_critic.zero_grad()
            lc.backward()
            opt_critic.step()
            stats["actor_loss"] += la.item()
            stats["critic_loss"] += lc.item()
            stats["n"] += 1
    k = max(stats.pop("n"), 1)
    return {key: v / k for key, v in stats.items()}


# --- checkpoints -----------------------------------------------------------

@dataclass
class PolicyCheckpoint:
    """Network weights plus what is needed to resume or transfer training.

    ``actor`` and ``critic`` map parameter names to arrays.  ``optimizer``
    holds Adam moments (may be empty), ``curve`` the learning curve so far.
    """

    actor: dict[str, np.ndarray]
    critic: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    curve: list[dict] = field(default_factory=list)

    @property
    def hidden(self) -> tuple[int, ...]:
        return tuple(self.meta["hidden"])

    def build(self) -> tuple[GaussianPolicy, ResidualMLP]:
        m = self.meta
        policy = GaussianPolicy(m["obs_dim"], m["act_dim"], self.hidden)
        critic = ResidualMLP(m["obs_dim"], 1, self.hidden)
        load_weights(policy, self.actor)
        load_weights(critic, self.critic)
        return policy, critic


def state_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().numpy().copy() for k, v in module.state_dict().items()}


def load_weights(module: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    own = module.state_dict()
    if set(own) != set(arrays):
        raise ValueError(f"parameter names differ: missing {sorted(set(own) - set(arrays))}, "
                         f"unexpected {sorted(set(arrays) - set(own))}")
    for k, v in own.items():
        if tuple(v.shape) != tuple(np.shape(arrays[k])):
            raise ValueError(f"shape mismatch for {k}: network {tuple(v.shape)}, checkpoint {np.shape(arrays[k])}")
    module.load_state_dict({k: torch.as_tensor(np.asarray(a, dtype=float), dtype=DTYPE) for k, a in arrays.items()})


def _optimizer_arrays(opt: torch.optim.Optimizer, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for i, st in opt.state_dict()["state"].items():
        for k, v in st.items():
            out[f"{prefix}/{i}/{k}"] = np.atleast_1d(np.asarray(v.detach().numpy() if torch.is_tensor(v) else v,
                                                                dtype=float))
    return out


def _restore_optimizer(opt: torch.optim.Optimizer, arrays: dict[str, np.ndarray], prefix: str) -> None:
    sd = opt.state_dict()
    state: dict[int, dict] = {}
    for key, a in arrays.items():
        p, i, k = key.split("/")
        if p != prefix:
            continue
        t = torch.as_tensor(a, dtype=DTYPE)
        state.setdefault(int(i), {})[k] = t.reshape(()) if k == "step" else t
    if state:
        sd["state"] = state
        opt.load_state_dict(sd)
        for st in opt.state.values():
            if "exp_avg" in st:
                p = next(q for g in opt.param_groups for q in g["params"] if opt.state[q] is st)
                st["exp_avg"] = st["exp_avg"].reshape(p.shape)
                st["exp_avg_sq"] = st["exp_avg_sq"].reshape(p.shape)


def save_checkpoint(ckpt: PolicyCheckpoint, path) -> None:
    """Write the checkpoint as magic, header length, JSON header, raw little-endian float64 data."""
    sections = {"actor": ckpt.actor, "critic": ckpt.critic, "optimizer": ckpt.optimizer}
    index, payload, offset = [], io.BytesIO(), 0
    for sec, arrays in sections.items():
        for name in sorted(arrays):
            a = np.ascontiguousarray(arrays[name], dtype="<f8")
            raw = a.tobytes()
            index.append({"section": sec, "name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
            payload.write(raw)
            offset += len(raw)
    header = json.dumps({"format_version": CHECKPOINT_VERSION, "dtype": "<f8", "meta": ckpt.meta,
                         "curve": ckpt.curve, "arrays": index}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(payload.getvalue())


def load_checkpoint(path) -> PolicyCheckpoint:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path} is not a policy checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    header = json.loads(data[pos:pos + hlen])
    pos += hlen
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint format version {header.get('format_version')} "
                         f"is not supported (expected {CHECKPOINT_VERSION})")
    sections: dict[str, dict] = {"actor": {}, "critic": {}, "optimizer": {}}
    for e in header["arrays"]:
        a = np.frombuffer(data, dtype="<f8", count=e["nbytes"] // 8, offset=pos + e["offset"])
        sections[e["section"]][e["name"]] = a.reshape(e["shape"]).astype(float)
    return PolicyCheckpoint(sections["actor"], sections["critic"], header["meta"],
                            sections["optimizer"], header["curve"])


# --- rollouts and training -------------------------------------------------

def episode_rng(seed: int, epoch: int, episode: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(epoch), int(episode)])))


def run_episode(policy: GaussianPolicy, env, rng: np.random.Generator | None, env_seed: int | None = None):
    """One episode; ``rng=None`` takes the mean action.  Returns a dict of arrays."""
    obs = env.reset(seed=env_seed)
    rec = {"obs": [], "act": [], "logp": [], "rew": []}
    done = False
    while not done:
        if rng is None:
            a = policy.act_mean(obs)
            lp = 0.0
        else:
            a, lp = policy_sample(policy, obs, rng)
        rec["obs"].append(obs)
        rec["act"].append(a)
        rec["logp"].append(lp)
        obs, r, done, _ = env.step(a)
        rec["rew"].append(r)
    return {k: np.asarray(v, dtype=float) for k, v in rec.items()}


def deterministic_rollout(policy: GaussianPolicy, env, seed: int | None = None) -> ControlProfile:
    """Run the mean action and return the resulting control profile (env keeps the history)."""
    run_episode(policy, env, None, seed)
    return env.profile()


def _collect(env_factory, actor_state, meta, seed, epoch, episodes):
    policy = GaussianPolicy(meta["obs_dim"], meta["act_dim"], tuple(meta["hidden"]))
    load_weights(policy, actor_state)
    env = env_factory()
    out = []
    for k in episodes:
        rng = episode_rng(seed, epoch, k)
        out.append(run_episode(policy, env, rng, env_seed=int(rng.integers(2 ** 62))))
    return out


def _chunks(n: int, parts: int):
    size = -(-n // parts)
    return [range(i, min(i + size, n)) for i in range(0, n, size)]


@dataclass
class TrainResult:
    policy: GaussianPolicy
    critic: ResidualMLP
    curve: list[dict]
    best: PolicyCheckpoint
    last: PolicyCheckpoint


def train(env_factory: Callable, cfg: TrainerConfig, warm_start: PolicyCheckpoint | None = None,
          checkpoint_dir=None, resume: bool = False, provenance: dict | None = None,
          on_epoch: Callable | None = None, snapshot_epochs=()) -> TrainResult:
    """Train a Gaussian policy on episodes from ``env_factory()``.

    ``warm_start`` copies network weights only.  With ``resume`` and a
    ``checkpoint_dir`` holding ``last.ckpt``, optimizer state and the learning
    curve are restored and training continues from the next epoch.  Epochs in
    ``snapshot_epochs`` are saved as ``epoch_<k>.ckpt``.
    """
    torch.manual_seed(cfg.seed)
    probe_env = env_factory()
    obs_dim, act_dim = int(probe_env.obs_dim), int(probe_env.act_dim)
    policy = GaussianPolicy(obs_dim, act_dim, cfg.hidden, cfg.init_log_sigma)
    critic = ResidualMLP(obs_dim, 1, cfg.hidden)
    opt_a = torch.optim.Adam(policy.parameters(), lr=cfg.lr_actor)
    opt_c = torch.optim.Adam(critic.parameters(), lr=cfg.lr_critic)
    meta = {"obs_dim": obs_dim, "act_dim": act_dim, "hidden": list(cfg.hidden), "seed": cfg.seed,
            "trainer": _jsonable({k: v for k, v in asdict(cfg).items() if k != "workers"}), **(provenance or {})}
    curve: list[dict] = []
    start = 0
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)
    if resume and ckdir is not None and (ckdir / "last.ckpt").exists():
        ck = load_checkpoint(ckdir / "last.ckpt")
        load_weights(policy, ck.actor)
        load_weights(critic, ck.critic)
        _restore_optimizer(opt_a, ck.optimizer, "actor")
        _restore_optimizer(opt_c, ck.optimizer, "critic")
        curve = list(ck.curve)
        start = int(ck.meta["epoch"]) + 1
        log.info("resuming at epoch %d", start)
    elif warm_start is not None:
        load_weights(policy, warm_start.actor)
        load_weights(critic, warm_start.critic)
        meta["warm_start"] = {k: warm_start.meta.get(k) for k in ("N", "task", "epoch", "seed")}

    def snapshot(epoch):
        return PolicyCheckpoint(state_arrays(policy), state_arrays(critic), {**meta, "epoch": epoch},
                                {**_optimizer_arrays(opt_a, "actor"), **_optimizer_arrays(opt_c, "critic")},
                                list(curve))

    best = last = snapshot(start - 1)
    best_score = max((c["mean_reward"] for c in curve), default=-np.inf)
    pool = ProcessPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for epoch in range(start, cfg.epochs):
            actor_state = state_arrays(policy)
            parts = _chunks(cfg.episodes_per_epoch, cfg.workers)
            if pool is None:
                eps = _collect(env_factory, actor_state, meta, cfg.seed, epoch, range(cfg.episodes_per_epoch))
            else:
                futs = [pool.submit(_collect, env_factory, actor_state, meta, cfg.seed, epoch, p) for p in parts]
                eps = [e for f in futs for e in f.result()]
            obs, act, logp, adv, ret, totals = [], [], [], [], [], []
            with torch.no_grad():
                for ep in eps:
                    v = critic(torch.as_tensor(ep["obs"], dtype=DTYPE)).squeeze(-1).numpy()
                    a, r = compute_gae(ep["rew"], v, cfg.gamma, cfg.lam)
                    obs.append(ep["obs"])
                    act.append(ep["act"])
                    logp.append(ep["logp"])
                    adv.append(a)
                    ret.append(r)
                    totals.append(ep["rew"].sum())
            batch = Batch.from_numpy(np.concatenate(obs), np.concatenate(act), np.concatenate(logp),
                                     np.concatenate(adv), np.concatenate(ret))
            gen = torch.Generator().manual_seed(int(np.random.SeedSequence([cfg.seed, epoch, 2 ** 31]).generate_state(1)[0]))
            stats = ppo_update(policy, critic, opt_a, opt_c, batch, cfg, gen)
            totals = np.asarray(totals)
            row = {"epoch": epoch, "mean_reward": float(totals.mean()), "std_reward": float(totals.std()),
                   "max_reward": float(totals.max()), "sigma": float(np.exp(policy.log_sigma.detach().numpy()).mean()),
                   **stats}
            curve.append(row)
            last = snapshot(epoch)
            if row["mean_reward"] > best_score:
                best_score = row["mean_reward"]
                best = last
                if ckdir is not None:
                    save_checkpoint(best, ckdir / "best.ckpt")
            if ckdir is not None:
                save_checkpoint(last, ckdir / "last.ckpt")
                if epoch in snapshot_epochs:
                    save_checkpoint(last, ckdir / f"epoch_{epoch}.ckpt")
            if on_epoch is not None:
                on_epoch(row)
            log.info("epoch %d mean reward %.4f", epoch, row["mean_reward"])
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainResult(policy, critic, curve, best, last)


def _jsonable(d):
    return json.loads(json.dumps(d, default=list))


def initial_checkpoint(obs_dim: int, act_dim: int, seed: int = 0, hidden=HIDDEN,
                       init_log_sigma: float = math.log(0.3), meta: dict | None = None) -> PolicyCheckpoint:
    """Untrained networks as created by ``train`` for this seed (epoch -1)."""
    torch.manual_seed(seed)
    policy = GaussianPolicy(obs_dim, act_dim, hidden, init_log_sigma)
    critic = ResidualMLP(obs_dim, 1, hidden)
    return PolicyCheckpoint(state_arrays(policy), state_arrays(critic),
                            {"obs_dim": obs_dim, "act_dim": act_dim, "hidden": list(hidden), "seed": seed,
                             "epoch": -1, **(meta or {})})


# --- toy environment -------------------------------------------------------

class ToyTargetEnv:
    """Steer a scalar q from 0 to ``target`` in ``M`` ramp steps.

    Terminal reward 1 - (q - target)^2 / scale, so the optimum is exactly 1.
    """

    obs_dim = 4
    act_dim = 1

    def __init__(self, target: float = 1.2, M: int = 10, dt: float = 0.1, rate_bound: float = 2.0,
                 scale: float = 0.5):
        self.target, self.M, self.dt, self.rate_bound, self.scale = target, M, dt, rate_bound, scale
        self.reset()

    def reset(self, seed=None):
        self.q, self.j, self.segments = 0.0, 0, []
        return self._obs()

    def _obs(self):
        return np.array([self.q, self.j / self.M, self.target, 0.0])

    def step(self, action):
        a = float(np.clip(np.atleast_1d(action)[0], -1, 1))
        self.q += a * self.rate_bound * self.dt
        self.j += 1
        self.segments.append((self.q, self.dt))
        done = self.j >= self.M
        r = 1.0 - (self.q - self.target) ** 2 / self.scale if done else 0.0
        return self._obs(), r, done, {}

    def profile(self) -> ControlProfile:
        return ControlProfile(segments=tuple(self.segments))

    optimum = 1.0
