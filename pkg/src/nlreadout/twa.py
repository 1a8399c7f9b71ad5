"""Truncated-Wigner simulation of dissipative spin-mixing dynamics.

Each trajectory carries three classical fields (psi+1, psi0, psi-1) and obeys

    dpsi = drift(psi; c2'(t), q) dt - gamma/2 psi dt
           + sqrt(gamma/2) dxi - (i/sqrt 2) dchi F psi

with c2'(t) = c2 e^{-gamma_c t} / (N e^{-gamma t}), complex Wiener increments
dxi (one per mode), a real common-mode increment dchi = omega0 dW and
F psi = (psi0, psi+1 + psi-1, psi0).  The deterministic part is advanced with
a classical RK4 step; the loss noise is added in Ito (Euler-Maruyama) form and the
RF noise is applied as an exact random rotation exp(-i dchi f_x) after the
deterministic step, which keeps the norm and is the Stratonovich reading of
the multiplicative term.

Units are whatever the config uses consistently (SI seconds and rad/s for the
experiment presets; c2 = -1 for comparisons with the exact engine).

Random numbers come from Philox streams keyed by (seed, chunk) with the step
index in the high counter word, so results do not depend on how chunks are
distributed over workers.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

SQRT_MHZ = math.sqrt(1e-3)


class DivergenceError(RuntimeError):
    """Too many trajectories produced non-finite fields."""


@dataclass(frozen=True)
class TWAConfig:
    N0: float
    c2: float
    gamma: float = 0.0
    gamma_c: float = 0.0
    omega0: float = 0.0
    dt: float = 1e-4
    n_traj: int = 1000
    seed: int = 0
    chunk_size: int = 256
    max_divergent_fraction: float = 1e-3

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.n_traj < 1:
            raise ValueError("n_traj must be >= 1")
        if min(self.gamma, self.gamma_c, self.omega0) < 0:
            raise ValueError("gamma, gamma_c and omega0 must be non-negative")
        if self.N0 <= 0:
            raise ValueError("N0 must be positive")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must fit in 64 bits")

    @classmethod
    def experiment(cls, **overrides) -> "TWAConfig":
        base = dict(
            N0=10900,
            c2=-2 * math.pi * 2.66,
            gamma=0.035,
            gamma_c=0.042,
            omega0=2 * math.pi * 0.006 * SQRT_MHZ,
        )
        base.update(overrides)
        return cls(**base)

    def c2_at(self, t: float) -> float:
        return self.c2 * math.exp(-self.gamma_c * t)

    def N_at(self, t: float) -> float:
        return self.N0 * math.exp(-self.gamma * t)

    @property
    def n_chunks(self) -> int:
        return -(-self.n_traj // self.chunk_size)

    def chunk_slice(self, k: int) -> slice:
        return slice(k * self.chunk_size, min(self.n_traj, (k + 1) * self.chunk_size))


@dataclass(frozen=True, eq=False)
class WignerEnsemble:
    config: TWAConfig
    fields: np.ndarray  # (n_traj, 3) complex, modes ordered +1, 0, -1
    t: float = 0.0
    step_index: int = 0
    divergent: np.ndarray = field(default=None)
    chunk_offset: int = 0  # first chunk index held by this (sub)ensemble

    def __post_init__(self):
        if self.divergent is None:
            object.__setattr__(self, "divergent", np.zeros(self.fields.shape[0], dtype=bool))

    @property
    def n_traj(self) -> int:
        return self.fields.shape[0]

    @property
    def c2(self) -> float:
        return self.config.c2_at(self.t)

    @property
    def N(self) -> float:
        return self.config.N_at(self.t)

    def chunks(self):
        cs = self.config.chunk_size
        for k in range(-(-self.n_traj // cs)):
            yield self.chunk_offset + k, slice(k * cs, min(self.n_traj, (k + 1) * cs))

    def split(self, parts: int) -> list["WignerEnsemble"]:
        """Partition on chunk boundaries; each part keeps its global chunk ids."""
        cs = self.config.chunk_size
        n_chunks = -(-self.n_traj // cs)
        bounds = np.linspace(0, n_chunks, min(parts, n_chunks) + 1).round().astype(int)
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = slice(lo * cs, min(self.n_traj, hi * cs))
            out.append(replace(self, fields=self.fields[sl].copy(), divergent=self.divergent[sl].copy(),
                               chunk_offset=self.chunk_offset + int(lo)))
        return out

    @staticmethod
    def join(parts: list["WignerEnsemble"]) -> "WignerEnsemble":
        first = parts[0]
        return replace(first, fields=np.concatenate([p.fields for p in parts]),
                       divergent=np.concatenate([p.divergent for p in parts]))


def _stream(seed: int, chunk: int, step: int) -> np.random.Generator:
    key = (int(seed) << 64) | int(chunk)
    return np.random.Generator(np.random.Philox(key=key, counter=[0, 0, 0, int(step)]))


def sample_polar_ensemble(config: TWAConfig) -> WignerEnsemble:
    """psi0 centred at sqrt(N0); every mode gets complex vacuum noise with <|dpsi|^2> = 1/2."""
    fields = np.empty((config.n_traj, 3), dtype=complex)
    for k in range(config.n_chunks):
        sl = config.chunk_slice(k)
        g = _stream(config.seed, k, 2 ** 63)  # counter word reserved for initial draws
        n = sl.stop - sl.start
        z = g.standard_normal((n, 3, 2)) * 0.5
        fields[sl] = z[..., 0] + 1j * z[..., 1]
    fields[:, 1] += math.sqrt(config.N0)
    return WignerEnsemble(config, fields)


def meanfield_drift(psi: np.ndarray, c2p: float, q: float) -> np.ndarray:
    """Spin-mixing drift for fields of shape (..., 3)."""
    p, z, m = psi[..., 0], psi[..., 1], psi[..., 2]
    ap, az, am = np.abs(p) ** 2, np.abs(z) ** 2, np.abs(m) ** 2
    out = np.empty_like(psi)
    out[..., 0] = -1j * c2p * (z * z * np.conj(m) + (ap - am + az) * p)
    out[..., 1] = -1j * c2p * (2 * p * m * np.conj(z) + (ap + am) * z) + 1j * q * z
    out[..., 2] = -1j * c2p * (z * z * np.conj(p) + (am - ap + az) * m)
    return out


def _rotate_x(psi: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Row-wise exp(-i theta_k f_x) psi_k."""
    c, s = np.cos(theta)[:, None], np.sin(theta)[:, None]
    p, z, m = psi[:, 0:1], psi[:, 1:2], psi[:, 2:3]
    mix = -1j * s / math.sqrt(2)
    return np.hstack([
        (1 + c) / 2 * p + mix * z + (c - 1) / 2 * m,
        mix * (p + m) + c * z,
        (c - 1) / 2 * p + mix * z + (1 + c) / 2 * m,
    ])


def _advance(ens: WignerEnsemble, q: float, h: float) -> WignerEnsemble:
    cfg = ens.config
    t = ens.t
    g, g2 = cfg.gamma, cfg.gamma / 2

    def c2p(s):
        return cfg.c2_at(s) / cfg.N_at(s)

    def f(psi, s):
        return meanfield_drift(psi, c2p(s), q) - g2 * psi

    psi = ens.fields
    with np.errstate(over="ignore", invalid="ignore"):  # blow-ups are flagged below
        k1 = f(psi, t)
        k2 = f(psi + 0.5 * h * k1, t + 0.5 * h)
        k3 = f(psi + 0.5 * h * k2, t + 0.5 * h)
        k4 = f(psi + h * k3, t + h)
        new = psi + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    if g > 0 or cfg.omega0 > 0:
        sq = math.sqrt(h)
        for chunk, sl in ens.chunks():
            rng = _stream(cfg.seed, chunk, ens.step_index)
            n = sl.stop - sl.start
            draws = rng.standard_normal((n, 7))
            if g > 0:
                dxi = (draws[:, 0:3] + 1j * draws[:, 3:6]) * (sq / math.sqrt(2))
                new[sl] += math.sqrt(g2) * dxi
            if cfg.omega0 > 0:
                dchi = cfg.omega0 * sq * draws[:, 6]
                new[sl] = _rotate_x(new[sl], dchi)

    bad = ~np.all(np.isfinite(new), axis=1)
    divergent = ens.divergent | bad
    if bad.any():
        new[bad] = 0.0
    return replace(ens, fields=new, t=t + h, step_index=ens.step_index + 1, divergent=divergent)


def _check_divergence(ens: WignerEnsemble):
    frac = ens.divergent.mean()
    if frac > ens.config.max_divergent_fraction:
        raise DivergenceError(f"{ens.divergent.sum()} of {ens.n_traj} trajectories diverged")


def step(ensemble: WignerEnsemble, q: float, dt: float | None = None) -> WignerEnsemble:
    """Advance by ``dt`` (default: the config step) at constant q."""
    h = ensemble.config.dt if dt is None else dt
    if not h > 0:
        raise ValueError("step must be positive")
    if h > ensemble.config.dt * (1 + 1e-12):
        raise ValueError("step larger than the configured dt; use run_segment")
    out = _advance(ensemble, q, h)
    _check_divergence(out)
    return out


def n_substeps(duration: float, dt: float) -> int:
    return max(1, math.ceil(duration / dt - 1e-9))


def run_segment(ensemble: WignerEnsemble, q: float, duration: float) -> WignerEnsemble:
    if duration < 0:
        raise ValueError("duration must be non-negative")
    if duration == 0:
        return ensemble
    n = n_substeps(duration, ensemble.config.dt)
    h = duration / n
    ens = ensemble
    for _ in range(n):
        ens = _advance(ens, q, h)
    _check_divergence(ens)
    return ens


def encode_phase_meanfield(ensemble: WignerEnsemble, phi: float) -> WignerEnsemble:
    """Apply exp(-i phi f_x) to every trajectory's spinor."""
    if not np.isfinite(phi):
        raise ValueError(f"non-finite angle {phi!r}")
    if phi == 0:
        return ensemble
    c, s = math.cos(phi), math.sin(phi)
    R = np.array([
        [(1 + c) / 2, -1j * s / math.sqrt(2), (c - 1) / 2],
        [-1j * s / math.sqrt(2), c, -1j * s / math.sqrt(2)],
        [(c - 1) / 2, -1j * s / math.sqrt(2), (1 + c) / 2],
    ])
    return replace(ensemble, fields=ensemble.fields @ R.T)


@dataclass(frozen=True)
class EnsembleObservables:
    t: float
    mean_rho0: float
    std_rho0: float
    mean_N: float
    correlator: complex
    n_valid: int

    @property
    def correlator_phase(self) -> float:
        return float(np.angle(self.correlator))


def _valid_fields(ensemble: WignerEnsemble) -> np.ndarray:
    psi = ensemble.fields[~ensemble.divergent]
    if psi.shape[0] == 0:
        raise DivergenceError("all trajectories diverged")
    return psi


def ensemble_observables(ensemble: WignerEnsemble) -> EnsembleObservables:
    """Symmetric-ordering estimators: n = |psi|^2 - 1/2, Var(n) = Var(|psi|^2) - 1/4."""
    psi = _valid_fields(ensemble)
    if psi.shape[0] < 2:
        raise ValueError("need at least two trajectories for fluctuation estimates")
    N = ensemble.N
    w0 = np.abs(psi[:, 1]) ** 2
    var_n0 = max(0.0, float(np.var(w0)) - 0.25)
    corr = np.mean(np.conj(psi[:, 0]) * np.conj(psi[:, 2]) * psi[:, 1] ** 2)
    return EnsembleObservables(
        t=ensemble.t,
        mean_rho0=float((w0.mean() - 0.5) / N),
        std_rho0=float(math.sqrt(var_n0) / N),
        mean_N=float(np.sum(np.abs(psi) ** 2, axis=1).mean() - 1.5),
        correlator=complex(corr),
        n_valid=int(psi.shape[0]),
    )


def mean_energy(ensemble: WignerEnsemble, q: float) -> float:
    """Weyl-symbol estimate of <H(q)> with the instantaneous c2(t) and N(t)."""
    psi = _valid_fields(ensemble)
    p, z, m = psi[:, 0], psi[:, 1], psi[:, 2]
    np_, n0, nm = (np.abs(p) ** 2 - 0.5), (np.abs(z) ** 2 - 0.5), (np.abs(m) ** 2 - 0.5)
    pair = 2 * np.conj(z) ** 2 * p * m
    bracket = 2 * pair.real + 2 * n0 * (np_ + nm) - (np_ + nm)
    return float(np.mean(ensemble.c2 / (2 * ensemble.N) * bracket - q * n0))


def _run_part(args):
    ens, segments, record_every = args
    return _run_profile_serial(ens, segments, record_every)


def _record_times(segments, record_every):
    total = sum(d for _, d in segments)
    if record_every is None or record_every <= 0:
        return []
    n = int(math.floor(total / record_every + 1e-9))
    return [k * record_every for k in range(1, n + 1)]


def _run_profile_serial(ens: WignerEnsemble, segments, record_every):
    """Returns per-record raw field snapshots (to be reduced after joining)."""
    marks = _record_times(segments, record_every)
    snaps = [(ens.t, segments[0][0] if segments else np.nan, ens.fields.copy(), ens.divergent.copy())]
    t0 = ens.t
    mi = 0
    for q, dur in segments:
        if dur == 0:
            continue
        n = n_substeps(dur, ens.config.dt)
        h = dur / n
        for _ in range(n):
            ens = _advance(ens, q, h)
            while mi < len(marks) and ens.t - t0 >= marks[mi] - 1e-9 * max(1.0, marks[mi]):
                snaps.append((ens.t, q, ens.fields.copy(), ens.divergent.copy()))
                mi += 1
    if segments and abs(snaps[-1][0] - ens.t) > 1e-12:
        snaps.append((ens.t, segments[-1][0], ens.fields.copy(), ens.divergent.copy()))
    return ens, snaps


def run_profile(ensemble: WignerEnsemble, segments, record_every: float | None = None,
                workers: int = 1):
    """Evolve through piecewise-constant (q, duration) segments.

    Returns the final ensemble and a list of (t, q, EnsembleObservables).
    Records are taken at t=0, at every multiple of ``record_every`` and at the
    end.  ``workers`` > 1 distributes chunks over processes without changing
    any number in the output.
    """
    segments = [(float(q), float(d)) for q, d in segments]
    for _, d in segments:
        if d < 0:
            raise ValueError("segment durations must be non-negative")
    if workers > 1 and ensemble.config.n_chunks > 1:
        parts = ensemble.split(workers)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_part, [(p, segments, record_every) for p in parts]))
        final = WignerEnsemble.join([r[0] for r in results])
        snaps = []
        for i in range(len(results[0][1])):
            t, q = results[0][1][i][:2]
            snaps.append((t, q, np.concatenate([r[1][i][2] for r in results]),
                          np.concatenate([r[1][i][3] for r in results])))
    else:
        final, snaps = _run_profile_serial(ensemble, segments, record_every)
    _check_divergence(final)
    records = []
    for t, q, fields, div in snaps:
        e = replace(ensemble, fields=fields, divergent=div, t=t)
        records.append((t, q, ensemble_observables(e)))
    return final, records
