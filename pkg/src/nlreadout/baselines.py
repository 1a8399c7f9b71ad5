"""Black-box optimizers over box-bounded control vectors, and the time-reversal readout.

All optimizers maximize.  Traces are lists of (evaluation index, value,
best so far, parameters).
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .profiles import ControlProfile


@dataclass
class BoxObjective:
    fn: Callable[[np.ndarray], float]
    lower: np.ndarray
    upper: np.ndarray
    budget: int = 10_000
    seed: int = 0

    def __post_init__(self):
        self.lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if self.lower.shape != self.upper.shape:
            raise ValueError("bounds must have the same shape")
        if not (np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper))):
            raise ValueError("bounds must be finite")
        if np.any(self.lower >= self.upper):
            raise ValueError("lower bounds must be below upper bounds")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")

    @classmethod
    def uniform(cls, fn, d: int, lo: float, hi: float, **kw) -> "BoxObjective":
        return cls(fn, np.full(d, lo), np.full(d, hi), **kw)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower


@dataclass
class OptimResult:
    x: np.ndarray
    value: float
    trace: list
    evaluations: int


class _Recorder:
    def __init__(self, obj: BoxObjective, workers: int = 1):
        self.obj, self.trace, self.best, self.bx = obj, [], -np.inf, None
        self.workers = workers

    @property
    def left(self) -> int:
        return self.obj.budget - len(self.trace)

    def _log(self, x, v):
        if v > self.best:
            self.best, self.bx = v, x.copy()
        self.trace.append((len(self.trace), v, self.best, x.copy()))

    def __call__(self, x) -> float:
        v = float(self.obj.fn(x))
        self._log(x, v)
        return v

    def many(self, xs) -> list[float]:
        if self.workers > 1 and len(xs) > 1:
            with ProcessPoolExecutor(self.workers) as ex:
                vals = [float(v) for v in ex.map(self.obj.fn, xs)]
        else:
            vals = [float(self.obj.fn(x)) for x in xs]
        for x, v in zip(xs, vals):
            self._log(x, v)
        return vals

    def result(self) -> OptimResult:
        return OptimResult(self.bx, self.best, self.trace, len(self.trace))


def _reflect(x, lo, hi):
    w = hi - lo
    y = np.mod(x - lo, 2 * w)
    return lo + np.where(y > w, 2 * w - y, y)


def simulated_annealing(obj: BoxObjective, x0=None, cooling: float = 0.995, step_frac: float = 0.1,
                        target_accept: float = 0.8, pilot: int = 20) -> OptimResult:
    """Metropolis search with geometric cooling T_k = T0 cooling^k.

    T0 is chosen so a typical worsening move from the start point is accepted
    with probability ``target_accept``.  Proposals are Gaussian with std
    ``step_frac`` of the box width, shrunk by sqrt(T/T0); they reflect at the
    bounds.
    """
    rng = np.random.default_rng(obj.seed)
    rec = _Recorder(obj)
    lo, hi = obj.lower, obj.upper
    x = rng.uniform(lo, hi) if x0 is None else np.clip(np.asarray(x0, dtype=float), lo, hi)
    fx = rec(x)
    worse = []
    for _ in range(min(pilot, rec.left)):
        y = _reflect(x + step_frac * obj.width * rng.standard_normal(obj.dim), lo, hi)
        fy = rec(y)
        if fy < fx:
            worse.append(fx - fy)
    t0 = (np.mean(worse) if worse else 1.0) / -math.log(target_accept)
    T, k = t0, 0
    while rec.left > 0:
        scale = step_frac * obj.width * math.sqrt(T / t0)
        y = _reflect(x + scale * rng.standard_normal(obj.dim), lo, hi)
        fy = rec(y)
        if fy >= fx or rng.random() < math.exp((fy - fx) / max(T, 1e-300)):
            x, fx = y, fy
        k += 1
        T = t0 * cooling ** k
    return rec.result()


def cma_es(obj: BoxObjective, x0=None, sigma0: float | None = None, popsize: int | None = None,
           workers: int = 1, tol_sigma: float = 1e-14) -> OptimResult:
    """(mu/mu_w, lambda)-CMA-ES with rank-one and rank-mu covariance updates.

    Infeasible samples are redrawn (up to 100 times, then clipped).
    """
    rng = np.random.default_rng(obj.seed)
    rec = _Recorder(obj, workers)
    n = obj.dim
    lo, hi = obj.lower, obj.upper
    lam = popsize or 4 + int(3 * math.log(n))
    mu = lam // 2
    w = math.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    w /= w.sum()
    mueff = 1.0 / np.sum(w ** 2)
    cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
    cs = (mueff + 2) / (n + mueff + 5)
    c1 = 2 / ((n + 1.3) ** 2 + mueff)
    cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
    damps = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (n + 1)) - 1) + cs
    chin = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))

    mean = rng.uniform(lo, hi) if x0 is None else np.asarray(x0, dtype=float)
    sigma = sigma0 if sigma0 is not None else 0.3 * float(np.mean(obj.width))
    pc, ps = np.zeros(n), np.zeros(n)
    C = np.eye(n)
    B, D = np.eye(n), np.ones(n)
    gen = 0
    while rec.left > 0 and sigma * D.max() > tol_sigma:
        k = min(lam, rec.left)
        zs, ys, xs = [], [], []
        for _ in range(k):
            for _attempt in range(100):
                z = rng.standard_normal(n)
                y = B @ (D * z)
                x = mean + sigma * y
                if np.all(x >= lo) and np.all(x <= hi):
                    break
            else:
                x = np.clip(x, lo, hi)
                y = (x - mean) / sigma
                z = (B.T @ y) / D
            zs.append(z)
            ys.append(y)
            xs.append(x)
        f = np.asarray(rec.many(xs))
        if k < lam:
            break
        order = np.argsort(-f, kind="stable")[:mu]
        Y = np.array(ys)[order]
        Z = np.array(zs)[order]
        yw = w @ Y
        mean = mean + sigma * yw
        ps = (1 - cs) * ps + math.sqrt(cs * (2 - cs) * mueff) * (B @ (w @ Z))
        gen += 1
        hsig = np.linalg.norm(ps) / math.sqrt(1 - (1 - cs) ** (2 * gen)) / chin < 1.4 + 2 / (n + 1)
        pc = (1 - cc) * pc + hsig * math.sqrt(cc * (2 - cc) * mueff) * yw
        C = ((1 - c1 - cmu) * C
             + c1 * (np.outer(pc, pc) + (1 - hsig) * cc * (2 - cc) * C)
             + cmu * (Y.T * w) @ Y)
        sigma *= math.exp((cs / damps) * (np.linalg.norm(ps) / chin - 1))
        C = np.triu(C) + np.triu(C, 1).T
        evals, B = np.linalg.eigh(C)
        D = np.sqrt(np.maximum(evals, 1e-300))
    return rec.result()


def time_reversal_profile(generation: ControlProfile) -> ControlProfile:
    """Reverse the segment order, negate each control value and flip the interaction sign.

    Together these run the generation Hamiltonian backwards in time: -H(q) for
    spin-1 (c2 and q flipped) and -H(Omega) for spin-1/2 (chi and Omega flipped).
    """
    if not generation.segments:
        raise ValueError("time reversal needs a non-empty generation profile")
    segs = tuple((-v, d) for v, d in reversed(generation.segments))
    return ControlProfile(segments=segs, tau1=generation.duration, tau2=generation.duration,
                          tau3=generation.tau3, interaction_sign=-generation.interaction_sign,
                          meta={"protocol": "time_reversal"})


def write_trace_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        d = len(trace[0][3]) if trace else 0
        wr.writerow(["evaluation", "value", "best"] + [f"x{i}" for i in range(d)])
        for i, v, b, x in trace:
            wr.writerow([i, repr(float(v)), repr(float(b))] + [repr(float(c)) for c in x])
