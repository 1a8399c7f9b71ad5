"""Phase-sensitivity scans of probe states followed by a readout profile."""
from __future__ import annotations

import numpy as np

from . import spin1, twa
from .metrology import (
    SensitivityReport,
    fd_angles,
    lz2_with_detection_noise,
    report_from_triplets,
)
from .profiles import ControlProfile

DETECTORS = ("rho0", "Lz2")


def _evolve_copies(basis, blocks, profile: ControlProfile | None):
    if profile is None or not profile.segments:
        return blocks
    ev = spin1.BlockEvolver(basis, c2=-1.0 * profile.interaction_sign)
    for q, d in profile.segments:
        blocks = ev.propagate(blocks, q, d)
    return blocks


def _detector_curves(basis, blocks, detector: str, sigma_n: float):
    mo = spin1.block_moments(basis, blocks)
    N = basis.N
    if detector == "rho0":
        mean = mo["n0"] / N
        std = np.sqrt(np.maximum(mo["n0sq"] - mo["n0"] ** 2, 0.0)) / N
        return mean, std, sigma_n
    if detector == "Lz2":
        mean, var = lz2_with_detection_noise(mo["lz2"], mo["lz4"], sigma_n)
        return mean, np.sqrt(var), 0.0
    raise ValueError(f"detector must be one of {DETECTORS}")


def sensitivity_scan(probe: spin1.SpinorFockState, profile: ControlProfile | None, phis,
                     detector: str = "rho0", sigma_n: float = 0.0, fd_step: float = 1e-3,
                     ) -> SensitivityReport:
    """Rotate the probe by each phi (and phi +- fd_step), run the readout, measure.

    For the rho0 detector ``sigma_n`` is added in quadrature to the rho0
    fluctuation.  For Lz2 it is the std of Gaussian noise on the measured Lz,
    propagated into the mean and variance of Lz^2.
    """
    phis = np.asarray(phis, dtype=float)
    basis = probe.basis
    copies = spin1.rotate_many(probe, fd_angles(phis, fd_step))
    copies = {m: a for m, a in copies.items() if np.abs(a).max() > 0}
    copies = _evolve_copies(basis, copies, profile)
    mean, std, extra = _detector_curves(basis, copies, detector, sigma_n)
    return report_from_triplets(phis, mean, std, N=basis.N, sigma_n_eff=extra, step=fd_step,
                                detector=detector, sigma_n=sigma_n,
                                meta={"readout_duration": profile.duration if profile else 0.0})


def gain_along_readout(probe: spin1.SpinorFockState, profile: ControlProfile, phis,
                       sigma_n: float = 0.0, fd_step: float = 1e-3, substeps: int = 1):
    """Best rho0-detection gain (over ``phis``) after each segment of the readout.

    Returns arrays t, rho0 (unencoded copy), best gain in dB.
    """
    from .metrology import gain_db, inverse_sensitivity

    phis = np.asarray(phis, dtype=float)
    basis = probe.basis
    angles = np.concatenate([[0.0], fd_angles(phis, fd_step)])
    blocks = spin1.rotate_many(probe, angles)
    blocks = {m: a for m, a in blocks.items() if np.abs(a).max() > 0}
    ev = spin1.BlockEvolver(basis, c2=-1.0 * profile.interaction_sign)

    def measure(b):
        mean, std, extra = _detector_curves(basis, b, "rho0", 0.0)
        m3, s3 = mean[1:].reshape(-1, 3), std[1:].reshape(-1, 3)
        f = inverse_sensitivity((m3[:, 2] - m3[:, 0]) / (2 * fd_step), s3[:, 1], sigma_n)
        fmax = float(np.max(f))
        return mean[0], gain_db(1.0 / fmax if fmax > 0 else np.inf, basis.N)

    r, g = measure(blocks)
    ts, rhos, gains = [0.0], [r], [g]
    t = 0.0
    for q, d in profile.segments:
        for _ in range(substeps):
            blocks = ev.propagate(blocks, q, d / substeps)
            t += d / substeps
            r, g = measure(blocks)
            ts.append(t)
            rhos.append(r)
            gains.append(g)
    return np.array(ts), np.array(rhos), np.array(gains)


def sensitivity_scan_twa(config: twa.TWAConfig, generation, readout, phis, sigma_n: float = 0.0,
                         fd_step: float = 1e-3, workers: int = 1) -> SensitivityReport:
    """rho0 sensitivity from semiclassical ensembles.

    ``generation`` and ``readout`` are physical-unit (q, duration) segment
    lists.  All phase copies share one noise realization.
    """
    phis = np.asarray(phis, dtype=float)
    ens = twa.sample_polar_ensemble(config)
    ens, _ = twa.run_profile(ens, generation, workers=workers)
    means, stds = [], []
    for phi in fd_angles(phis, fd_step):
        e = twa.encode_phase_meanfield(ens, phi)
        _, rec = twa.run_profile(e, readout, workers=workers)
        obs = rec[-1][2]
        means.append(obs.mean_rho0)
        stds.append(obs.std_rho0)
    return report_from_triplets(phis, means, stds, N=ens.N, sigma_n_eff=sigma_n, step=fd_step,
                                detector="rho0", sigma_n=sigma_n, meta={"backend": "twa"})
