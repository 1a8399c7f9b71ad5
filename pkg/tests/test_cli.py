import csv
import json
import math

import numpy as np
import pytest
import yaml

from nlreadout.cli import main
from nlreadout.config import PRESETS, RunConfig, dump_config, load_config
from nlreadout.profiles import ControlProfile


def run(tmp_path, *argv, config=None, name="out"):
    argv = list(argv)
    if config is not None:
        p = tmp_path / f"{name}.yaml"
        p.write_text(yaml.safe_dump(config))
        argv += ["--config", str(p)]
    out = tmp_path / name
    code = main([*argv, "--out", str(out)])
    return code, out


def rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def digests(out):
    return json.loads((out / "manifest.json").read_text())["outputs"]


def test_presets_validate():
    for name in PRESETS:
        cfg = load_config(preset=name)
        assert isinstance(cfg, RunConfig)
    exp = load_config(preset="paper-exp")
    assert exp.physics.N == 10900 and exp.physics.gamma == 0.035 and exp.physics.gamma_c == 0.042
    assert exp.physics.omega0 == pytest.approx(2 * math.pi * 0.006 * math.sqrt(1e-3))
    small = load_config(preset="paper-small")
    assert small.physics.N == 50 and small.episode.sigma_n == 0.02
    assert load_config(preset="spinhalf-twinfock").spinhalf.N == 50


def test_config_round_trip_and_units(tmp_path):
    cfg = load_config(preset="paper-small", overrides={"seed": 11})
    again = RunConfig.model_validate(yaml.safe_load(dump_config(cfg)))
    assert again == cfg
    p = cfg.physics
    assert p.q_units(2.66) == pytest.approx(1.0)
    assert p.t_units(1 / (2 * math.pi * 2.66)) == pytest.approx(1.0)
    e = cfg.episode_config()
    assert e.q_high == pytest.approx(3.0) and e.tau == pytest.approx(10.0)


def test_shipped_example_config_loads():
    from pathlib import Path

    path = Path(__file__).resolve().parents[1] / "configs" / "paper-small.yaml"
    cfg = load_config(path)
    assert cfg == load_config(preset="paper-small")


@pytest.mark.parametrize("bad", [
    {"physics": {"N": 10, "colour": 3}},
    {"physics": {"c2_hz": 1.0}},
    {"episode": {"task": "prepare", "reward": "sensitivity"}},
    {"trainer": {"clip": 2}},
    {"nonsense": True},
])
def test_schema_errors_exit_2(tmp_path, bad):
    code, out = run(tmp_path, "simulate", config=bad)
    assert code == 2 and not out.exists()


def test_unreadable_and_malformed_config(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path / "o")]) == 4
    (tmp_path / "bad.yaml").write_text("physics: [unclosed\n")
    assert main(["simulate", "--config", str(tmp_path / "bad.yaml"), "--out", str(tmp_path / "o")]) == 2
    assert main(["simulate", "--preset", "no-such", "--out", str(tmp_path / "o")]) == 2


def test_output_location_error_exit_4(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["show-config", "--out", str(blocker / "sub")]) == 4


def test_divergence_exit_3(tmp_path):
    cfg = {"backend": "twa", "physics": {"N": 100}, "twa": {"dt": 5.0, "n_traj": 20},
           "simulate": {"segments": [[1e6, 100.0]]}}
    code, _ = run(tmp_path, "simulate", config=cfg)
    assert code == 3


def test_simulate_empty_profile_single_row(tmp_path):
    code, out = run(tmp_path, "simulate", "--preset", "paper-small")
    assert code == 0
    r = rows(out / "timeseries.csv")
    assert r[0] == ["t_s", "q_over_c2", "rho0_mean", "rho0_std", "N_mean"] and len(r) == 2
    assert "timeseries.csv" in digests(out)


def test_simulate_twa_is_reproducible_and_worker_independent(tmp_path):
    cfg = {"backend": "twa", "physics": {"N": 2000, "gamma": 0.035, "omega0": 0.01},
           "twa": {"dt": 1e-3, "n_traj": 300, "chunk_size": 64},
           "simulate": {"segments": [[4.0, 0.2], [0.0, 0.1]], "record_every_s": 0.05}}
    c1, a = run(tmp_path, "simulate", "--seed", "4", config=cfg, name="a")
    c2, b = run(tmp_path, "simulate", "--seed", "4", "--workers", "3", config=cfg, name="b")
    c3, c = run(tmp_path, "simulate", "--seed", "5", config=cfg, name="c")
    assert c1 == c2 == c3 == 0
    assert digests(a) == digests(b) != digests(c)
    r = rows(a / "timeseries.csv")[1:]
    for t, _, _, _, n in r:
        assert float(n) == pytest.approx(2000 * math.exp(-0.035 * float(t)), rel=0.01)


def test_scan_dicke_closed_form(tmp_path):
    N = 20
    cfg = {"physics": {"N": N}, "scan": {"detector": "Lz2", "phi_start": 1e-5, "phi_stop": 1e-5, "n_phi": 1,
                                        "fd_step": 1e-6}}
    code, out = run(tmp_path, "scan", config=cfg)
    assert code == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["dphi"][0] == pytest.approx(1 / math.sqrt(2 * N * (N + 1)), rel=1e-6)
    assert rep["dphi_sql"] == pytest.approx(1 / (2 * math.sqrt(N)))
    assert len(rows(out / "scan.csv")) == 2


def test_scan_noise_sweep_is_monotone(tmp_path):
    gains = []
    for k, s in enumerate((0.0, 0.5, 2.0)):
        cfg = {"physics": {"N": 16}, "scan": {"detector": "Lz2", "sigma_n": s, "n_phi": 10}}
        code, out = run(tmp_path, "scan", config=cfg, name=f"s{k}")
        assert code == 0
        gains.append(json.loads((out / "report.json").read_text())["best"]["gain_db"])
    assert gains[0] >= gains[1] >= gains[2]


def test_baseline_time_reversal_profile(tmp_path):
    gen = ControlProfile(segments=((1.0, 0.5), (-0.5, 0.25)))
    gen.save(tmp_path / "gen.json")
    code, out = run(tmp_path, "baseline", "--profile", str(tmp_path / "gen.json"),
                    config={"physics": {"N": 10}, "baseline": {"method": "tr"}})
    assert code == 0
    tr = ControlProfile.load(out / "best_profile.json")
    assert tr.segments == ((0.5, 0.25), (-1.0, 0.5)) and tr.interaction_sign == -1


def test_baseline_spinhalf_tr_and_cma(tmp_path):
    code, out = run(tmp_path, "baseline", "--preset", "spinhalf-readout",
                    config={"baseline": {"method": "tr"}, "spinhalf": {"N": 20}}, name="tr")
    assert code == 0
    assert len(rows(out / "score_along.csv")) == 3
    code, out = run(tmp_path, "baseline", "--preset", "spinhalf-twinfock",
                    config={"baseline": {"method": "cma", "budget": 30, "trials": 2}, "spinhalf": {"N": 10}},
                    name="cma")
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert len(summary["trials"]) == 2
    best = [float(r[2]) for r in rows(out / "trace_0.csv")[1:]]
    assert best == sorted(best) and len(best) == 30


def _train_cfg(epochs):
    return {"physics": {"N": 8},
            "episode": {"task": "readout", "M": 3, "tau_s": 0.05, "phi_step": 0.01, "phi_max": 0.03},
            "trainer": {"epochs": epochs, "episodes_per_epoch": 4, "snapshot_epochs": [0, 1, 2]}}


def test_train_scatter_and_resume(tmp_path):
    code, out = run(tmp_path, "train", "--seed", "3", config=_train_cfg(3), name="full")
    assert code == 0
    assert len(rows(out / "learning_curve.csv")) == 4
    cks = sorted((out / "checkpoints").glob("epoch_*.ckpt"))
    assert len(cks) == 3
    code, part = run(tmp_path, "train", "--seed", "3", config=_train_cfg(1), name="part")
    (tmp_path / "part.yaml").write_text(yaml.safe_dump(_train_cfg(3)))
    code = main(["train", "--seed", "3", "--config", str(tmp_path / "part.yaml"), "--resume", "--out", str(part)])
    assert code == 0
    assert (part / "learning_curve.csv").read_bytes() == (out / "learning_curve.csv").read_bytes()
    assert digests(part)["checkpoints/last.ckpt"] == digests(out)["checkpoints/last.ckpt"]

    argv = ["scatter", "--seed", "1"]
    for c in cks:
        argv += ["--checkpoint", str(c)]
    code, sc = run(tmp_path, *argv, config={**_train_cfg(3), "scatter": {"n_samples": 5}}, name="sc")
    assert code == 0
    r = rows(sc / "scatter.csv")
    assert r[0] == ["epoch", "max_rho0", "max_gain_db"] and len(r) == 1 + 3 * 5
    code, sc2 = run(tmp_path, *argv, config={**_train_cfg(3), "scatter": {"n_samples": 5}}, name="sc2")
    assert digests(sc) == digests(sc2)

    code, ro = run(tmp_path, "readout", "--checkpoint", str(out / "checkpoints" / "best.ckpt"),
                   config=_train_cfg(3), name="ro")
    assert code == 0 and (ro / "report.json").exists()


def test_train_digests_independent_of_workers(tmp_path):
    c1, a = run(tmp_path, "train", "--seed", "9", config=_train_cfg(2), name="w1")
    c2, b = run(tmp_path, "train", "--seed", "9", "--workers", "2", config=_train_cfg(2), name="w2")
    assert c1 == c2 == 0
    assert digests(a) == digests(b)


def test_warm_start_flag(tmp_path):
    code, src = run(tmp_path, "train", config=_train_cfg(1), name="src")
    big = _train_cfg(1)
    big["physics"]["N"] = 12
    code, dst = run(tmp_path, "train", "--warm-start", str(src / "checkpoints" / "last.ckpt"), config=big,
                    name="dst")
    assert code == 0
    from nlreadout.ppo import load_checkpoint

    assert load_checkpoint(dst / "checkpoints" / "last.ckpt").meta["warm_start"]["N"] == 8


def test_contours_and_show_config(tmp_path):
    code, out = run(tmp_path, "contours", "--q", "0.5")
    assert code == 0
    r = rows(out / "contours.csv")
    assert r[0] == ["rho0", "theta", "energy"] and len(r) > 100
    code, out = run(tmp_path, "show-config", "--preset", "paper-exp", name="sc")
    assert load_config(out / "config.yaml") == load_config(preset="paper-exp")
