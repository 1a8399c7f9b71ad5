import math

import numpy as np
import pytest
from scipy.linalg import expm
from scipy.special import comb

from nlreadout.baselines import time_reversal_profile
from nlreadout.profiles import ControlProfile
from nlreadout.spinhalf import (
    DickeState, SpinHalfConfig, SpinHalfEnv, css_x, dicke, fidelity, generate_probe, m_values, moments,
    oat_evolve, oat_propagate, observation, rotate_about_Jy, rotate_about_Jy_many, run_profile, score_along,
    sensitivity_Jy, spin_ops, twin_fock,
)
from oracles import spin_half_ops


def _expect(op, a):
    return np.vdot(a, op @ a)


@pytest.mark.parametrize("N", [1, 2, 5, 10])
def test_spin_ops_match_oracle(N):
    for mine, ref in zip(spin_ops(N), spin_half_ops(N)):
        assert np.allclose(mine, ref, atol=1e-13)


def test_css_examples():
    assert css_x(1).amps == pytest.approx([1 / math.sqrt(2)] * 2)
    mo = moments(css_x(100).amps)
    assert mo["jx"] == pytest.approx(50, abs=1e-10)
    for N in (2, 7, 10):
        jx, jy, jz = spin_half_ops(N)
        a = css_x(N).amps
        assert _expect(jy @ jy, a).real == pytest.approx(N / 4, abs=1e-12)
        assert _expect(jz @ jz, a).real == pytest.approx(N / 4, abs=1e-12)


@pytest.mark.parametrize("N", [3, 8])
def test_moments_match_dense(N):
    rng = np.random.default_rng(N)
    a = rng.standard_normal(N + 1) + 1j * rng.standard_normal(N + 1)
    a /= np.linalg.norm(a)
    jx, jy, jz = spin_half_ops(N)
    mo = moments(a)
    ref = {"jx": jx, "jy": jy, "jz": jz, "jz2": jz @ jz, "jx2": jx @ jx, "jy2": jy @ jy,
           "jyjz": jy @ jz + jz @ jy, "jxjz": jx @ jz + jz @ jx, "jxjy": jx @ jy + jy @ jx}
    for k, op in ref.items():
        assert mo[k] == pytest.approx(_expect(op, a).real, abs=1e-12), k


@pytest.mark.parametrize("N,chi,om,t", [(4, 1.0, 0.7, 0.9), (10, -1.0, 3.0, 0.15), (9, 0.3, -30.0, 0.05)])
def test_oat_matches_dense_expm(N, chi, om, t):
    jx, _, jz = spin_half_ops(N)
    a = css_x(N).amps
    ref = expm(-1j * t * (chi * jz @ jz + om * jx)) @ a
    assert np.max(np.abs(oat_propagate(a, chi, om, t) - ref)) < 1e-10


def test_oat_limits():
    a = generate_probe(20)
    rot = oat_evolve(a, 0.0, 2.0, 0.4)
    assert moments(rot.amps)["jx"] == pytest.approx(moments(a.amps)["jx"], abs=1e-10)
    tw = oat_evolve(a, 1.0, 0.0, 0.4)
    assert np.abs(tw.amps) ** 2 == pytest.approx(np.abs(a.amps) ** 2, abs=1e-12)
    with pytest.raises(ValueError):
        oat_propagate(a.amps, 1.0, 1.0, -1.0)


def test_standard_probe_has_large_jy_fluctuation():
    mo = moments(generate_probe(100, 1.0, 1.0, 0.15).amps)
    assert mo["jy2"] > 100 / 4


def test_rotation_about_jy():
    N = 8
    _, jy, _ = spin_half_ops(N)
    a = generate_probe(N).amps
    assert rotate_about_Jy(DickeState(a), 0.0).amps == pytest.approx(a)
    many = rotate_about_Jy_many(a, [0.3, -1.1])
    for k, phi in enumerate([0.3, -1.1]):
        assert np.max(np.abs(many[:, k] - expm(-1j * phi * jy) @ a)) < 1e-12


def test_css_sensitivity_is_sql_with_jz():
    for N in (4, 10, 100):
        rep = sensitivity_Jy(css_x(N), None, [1e-4], fd_step=1e-6, observable="Jz")
        assert rep.dphi[0] == pytest.approx(1 / math.sqrt(N), rel=1e-6)
        assert rep.gain_db[0] == pytest.approx(0.0, abs=1e-4)
    # Jy itself is invariant under the rotation, so the slope vanishes
    assert sensitivity_Jy(css_x(10), None, [0.01]).dphi[0] > 1e8


def test_time_reversal_echo_and_gain():
    N = 100
    probe = generate_probe(N)
    gen = ControlProfile(segments=((1.0, 0.15),))
    tr = time_reversal_profile(gen)
    back = run_profile(probe.amps, tr)
    assert fidelity(DickeState(back / np.linalg.norm(back)), css_x(N)) > 1 - 1e-9
    rep = sensitivity_Jy(probe, tr, [1e-4, 0.01])
    assert rep.gain_db[0] > 0


def test_echo_for_random_profiles():
    rng = np.random.default_rng(0)
    a = css_x(30).amps
    segs = tuple((float(o), float(d)) for o, d in zip(rng.uniform(-30, 30, 6), rng.uniform(0, 0.1, 6)))
    fwd = run_profile(a, ControlProfile(segments=segs))
    back = run_profile(fwd, time_reversal_profile(ControlProfile(segments=segs)))
    assert abs(np.vdot(a, back)) == pytest.approx(1.0, abs=1e-9)


def test_casimir_and_parity_symmetry_along_trajectories():
    N = 40
    j = N / 2
    env = SpinHalfEnv(SpinHalfConfig(task="twinfock", N=N, duration=2.0))
    rng = np.random.default_rng(1)
    env.reset()
    for _ in range(10):
        env.step([rng.uniform(-1, 1)])
        mo = moments(env.amps[:, 0])
        assert mo["jx2"] + mo["jy2"] + mo["jz2"] == pytest.approx(j * (j + 1), rel=1e-12)
        for k in ("jy", "jz", "jxjz", "jxjy"):
            assert abs(mo[k]) < 1e-9 * N ** 2, k


def test_twin_fock_overlap_closed_form():
    for N in (2, 6, 10, 50):
        j = N // 2
        ref = 2.0 ** (-j) * math.sqrt(comb(2 * j, j, exact=True))
        assert fidelity(css_x(N), twin_fock(N)) == pytest.approx(ref, rel=1e-10)
    env = SpinHalfEnv(SpinHalfConfig.twinfock(N=10))
    assert env.score() == pytest.approx(fidelity(css_x(10), twin_fock(10)))
    env.amps = twin_fock(10).amps[:, None]
    assert env.score() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        twin_fock(5)


def test_observation_of_css():
    for N in (4, 10):
        j = N / 2
        jx, jy, jz = spin_half_ops(N)
        a = css_x(N).amps
        ref = [_expect(jx, a).real / j, _expect(jx @ jx, a).real / j ** 2, _expect(jy @ jy, a).real / j ** 2,
               _expect(jy @ jz + jz @ jy, a).real / j ** 2]
        assert observation(a) == pytest.approx(ref, abs=1e-12)
        assert observation(a)[0] == pytest.approx(1.0)


def test_episode_emits_one_terminal_reward():
    env = SpinHalfEnv(SpinHalfConfig(N=20))
    env.reset()
    rewards = [env.step([0.1])[1] for _ in range(10)]
    assert rewards[:9] == [0.0] * 9 and rewards[9] != 0.0
    with pytest.raises(RuntimeError):
        env.step([0.0])
    assert env.evaluate([3.0] * 10) == pytest.approx(env.evaluate(np.full(10, 3.0)))


def test_evaluate_matches_sensitivity_report():
    cfg = SpinHalfConfig(N=30)
    env = SpinHalfEnv(cfg)
    om = np.linspace(-20, 20, 10)
    g = env.evaluate(om)
    prof = ControlProfile(segments=tuple((o, 0.015) for o in om))
    rep = sensitivity_Jy(env.probe, prof, env.phis, fd_step=cfg.fd_step)
    assert g == pytest.approx(rep.best_gain_db, abs=1e-9)
    ts, sc = score_along(env, prof)
    assert len(ts) == 11 and sc[-1] == pytest.approx(g, abs=1e-9)


def test_state_and_config_validation():
    with pytest.raises(ValueError):
        DickeState(np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        SpinHalfConfig(task="squeeze")
    with pytest.raises(ValueError):
        SpinHalfConfig.twinfock(N=7)
    assert m_values(2).tolist() == [-1, 0, 1]
    assert dicke(4, 1).amps[3] == 1
