"""Error-propagation phase sensitivity and metrological gain."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


def sql(N: float, kind: str = "three_mode") -> float:
    """Standard quantum limit: 1/(2 sqrt N) for three-mode spin-1, 1/sqrt N for two-mode."""
    if kind == "three_mode":
        return 1.0 / (2.0 * math.sqrt(N))
    if kind == "two_mode":
        return 1.0 / math.sqrt(N)
    raise ValueError(f"unknown SQL kind {kind!r}")


def gain_db(dphi, N: float, sql_kind: str = "three_mode"):
    """-20 log10(dphi / dphi_SQL); infinite dphi maps to -inf."""
    dphi = np.asarray(dphi, dtype=float)
    with np.errstate(divide="ignore"):
        out = -20.0 * np.log10(dphi / sql(N, sql_kind))
    return float(out) if out.ndim == 0 else out


def inverse_sensitivity(slope, std, sigma_n: float = 0.0):
    """|slope| / sqrt(std^2 + sigma_n^2)."""
    slope = np.asarray(slope, dtype=float)
    den = np.sqrt(np.asarray(std, dtype=float) ** 2 + sigma_n ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(den > 0, np.abs(slope) / np.where(den > 0, den, 1.0), np.where(slope != 0, np.inf, 0.0))
    return f


def lz2_with_detection_noise(mean_lz2, mean_lz4, sigma_n: float):
    """Mean and variance of Lz^2 when Lz is read out with Gaussian noise of std sigma_n."""
    s2 = sigma_n ** 2
    mean = np.asarray(mean_lz2) + s2
    var = np.asarray(mean_lz4) - np.asarray(mean_lz2) ** 2 + 4 * s2 * np.asarray(mean_lz2) + 2 * s2 * s2
    return mean, np.maximum(var, 0.0)


@dataclass
class SensitivityReport:
    phis: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    slope: np.ndarray
    dphi: np.ndarray
    gain_db: np.ndarray
    N: float
    dphi_sql: float
    sql_kind: str
    detector: str
    sigma_n: float
    fd_step: float
    meta: dict = field(default_factory=dict)

    @property
    def degenerate(self) -> bool:
        return bool(np.all(~np.isfinite(self.dphi)))

    @property
    def best_index(self) -> int:
        g = np.where(np.isfinite(self.gain_db), self.gain_db, -np.inf)
        return int(np.argmax(g))

    @property
    def best_gain_db(self) -> float:
        return float(self.gain_db[self.best_index])

    @property
    def best_phi(self) -> float:
        return float(self.phis[self.best_index])

    @property
    def best_dphi(self) -> float:
        return float(self.dphi[self.best_index])

    def rows(self):
        return np.column_stack([self.phis, self.mean, self.std, self.dphi, self.gain_db])

    def to_dict(self) -> dict:
        def clean(a):
            return [None if not np.isfinite(x) else float(x) for x in np.asarray(a, dtype=float)]

        return {
            "format": "nlreadout.sensitivity/1",
            "detector": self.detector,
            "N": self.N,
            "sigma_n": self.sigma_n,
            "sql_kind": self.sql_kind,
            "dphi_sql": self.dphi_sql,
            "fd_step": self.fd_step,
            "phi": clean(self.phis),
            "mean": clean(self.mean),
            "std": clean(self.std),
            "slope": clean(self.slope),
            "dphi": clean(self.dphi),
            "gain_db": clean(self.gain_db),
            "best": {"phi": self.best_phi, "dphi": self.best_dphi, "gain_db": self.best_gain_db},
            "degenerate": self.degenerate,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def fd_angles(phis, step: float) -> np.ndarray:
    """Angles needed for central differences: for each phi, (phi - step, phi, phi + step)."""
    phis = np.asarray(phis, dtype=float)
    return np.stack([phis - step, phis, phis + step], axis=1).ravel()


def report_from_triplets(phis, mean3, std3, *, N, sigma_n_eff: float, step: float,
                         detector: str, sigma_n: float, sql_kind: str = "three_mode",
                         meta: dict | None = None) -> SensitivityReport:
    """Build a report from observable means/stds laid out as in ``fd_angles``.

    ``std3`` already contains any detector-model noise; ``sigma_n_eff`` is an
    extra amount added in quadrature (zero when the detector model handled it).
    """
    phis = np.asarray(phis, dtype=float)
    mean3 = np.asarray(mean3, dtype=float).reshape(-1, 3)
    std3 = np.asarray(std3, dtype=float).reshape(-1, 3)
    slope = (mean3[:, 2] - mean3[:, 0]) / (2 * step)
    std = np.sqrt(std3[:, 1] ** 2 + sigma_n_eff ** 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        dphi = np.where(slope != 0, std / np.abs(slope), np.inf)
    s = sql(N, sql_kind)
    return SensitivityReport(
        phis=phis, mean=mean3[:, 1], std=std, slope=slope, dphi=dphi,
        gain_db=gain_db(dphi, N, sql_kind), N=N, dphi_sql=s, sql_kind=sql_kind,
        detector=detector, sigma_n=sigma_n, fd_step=step, meta=dict(meta or {}),
    )
