"""Command-line driver.

Every command writes its outputs plus ``manifest.json`` into ``--out``.
Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import functools
import hashlib
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import __version__, baselines, spin1, spinhalf, twa
from .config import RunConfig, dump_config, load_config
from .env import SpinorEnv, epoch_scatter, replay
from .meanfield import contour_rows
from .ppo import deterministic_rollout, load_checkpoint, save_checkpoint, train
from .profiles import ControlProfile
from .scan import sensitivity_scan

log = logging.getLogger("nlreadout")

EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 2, 3, 4


class ConfigError(Exception):
    pass


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for r in rows:
            wr.writerow([_fmt(v) for v in r])


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, cfg: RunConfig, command: str, started: float, files: list[Path],
                   extra: dict | None = None) -> dict:
    man = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "workers": cfg.workers,
        "config": cfg.model_dump(mode="json"),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "outputs": {str(f.relative_to(out)): sha256(f) for f in sorted(files)},
        **(extra or {}),
    }
    write_json(out / "manifest.json", man)
    return man


# --- helpers ----------------------------------------------------------------

def _env_factory(cfg: RunConfig, task: str | None = None, **episode_overrides):
    if cfg.system == "spinhalf":
        over = {"task": task} if task else {}
        return functools.partial(spinhalf.SpinHalfEnv, cfg.spinhalf_config(**over))
    if task:
        episode_overrides["task"] = task
    return functools.partial(SpinorEnv, cfg.episode_config(**episode_overrides))


def _load_profile(path) -> ControlProfile:
    if path is None:
        return None
    return ControlProfile.load(path)


def _spin1_probe(cfg: RunConfig, kind: str, q_hz: float) -> spin1.SpinorFockState:
    N = cfg.physics.N
    if kind == "polar":
        return spin1.polar_state(spin1.build_basis(N))
    return spin1.ground_state(spin1.SystemParams(N, -1.0, cfg.physics.q_units(q_hz)))


def _history_rows(cfg: RunConfig, env) -> tuple[list[str], list]:
    if cfg.system == "spinhalf":
        return ["chi_t", "omega", "score"], [(h["t"], h["omega"], h.get("score")) for h in env.history]
    t_unit = 1 / cfg.physics.t_units(1.0)
    return (["t_s", "q_over_c2", "rho0", "gain_db"],
            [(h["t"] * t_unit, h["q"], h["rho0"], h.get("gain_db")) for h in env.history])


# --- commands ---------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, out: Path, args) -> list[Path]:
    if cfg.system != "spin1":
        raise ConfigError("simulate supports the spin1 system")
    segs = cfg.simulate.segments
    every = cfg.simulate.record_every_s
    c2abs = abs(cfg.physics.c2_rad)
    rows = []
    if cfg.backend == "twa":
        ens = twa.sample_polar_ensemble(cfg.twa_config())
        phys = [(2 * math.pi * q, d) for q, d in segs]
        _, rec = twa.run_profile(ens, phys, record_every=every, workers=cfg.workers)
        for t, q, o in rec:
            rows.append((t, q / c2abs, o.mean_rho0, o.std_rho0, o.mean_N))
    else:
        basis = spin1.build_basis(cfg.physics.N)
        ev = spin1.BlockEvolver(basis, c2=-1.0)
        blocks = {m: a[:, None] for m, a in spin1.polar_state(basis).blocks.items()}
        N = cfg.physics.N

        def measure(t, q):
            mo = spin1.block_moments(basis, blocks)
            var = max(mo["n0sq"][0] - mo["n0"][0] ** 2, 0.0)
            rows.append((t, q, mo["n0"][0] / N, math.sqrt(var) / N, float(N)))

        t = 0.0
        measure(t, segs[0][0] / abs(cfg.physics.c2_hz) if segs else 0.0)
        for q_hz, d in segs:
            q = cfg.physics.q_units(q_hz)
            n = max(1, math.ceil(d / every - 1e-9)) if every else 1
            for _ in range(n):
                blocks = ev.propagate(blocks, q, cfg.physics.t_units(d / n))
                t += d / n
                measure(t, q)
    path = out / "timeseries.csv"
    write_csv(path, ["t_s", "q_over_c2", "rho0_mean", "rho0_std", "N_mean"], rows)
    return [path]


def cmd_train(cfg: RunConfig, out: Path, args) -> list[Path]:
    factory = _env_factory(cfg)
    warm = load_checkpoint(args.warm_start) if args.warm_start else None
    task = cfg.spinhalf.task if cfg.system == "spinhalf" else cfg.episode.task
    N = cfg.spinhalf.N if cfg.system == "spinhalf" else cfg.physics.N
    ckdir = out / "checkpoints"
    res = train(factory, cfg.trainer_config(), warm_start=warm, checkpoint_dir=ckdir, resume=args.resume,
                provenance={"system": cfg.system, "task": task, "N": N},
                snapshot_epochs=cfg.trainer.snapshot_epochs)
    curve = out / "learning_curve.csv"
    write_csv(curve, ["epoch", "mean_reward", "std_reward", "max_reward", "sigma"],
              [(c["epoch"], c["mean_reward"], c["std_reward"], c["max_reward"], c["sigma"]) for c in res.curve])
    env = factory()
    prof = deterministic_rollout(res.best.build()[0], env)
    ppath = out / "best_profile.json"
    prof.save(ppath)
    return [curve, ppath, *sorted(ckdir.glob("*.ckpt"))]


def _rollout(cfg: RunConfig, out: Path, args, task: str) -> list[Path]:
    over = {"track_gain": True} if cfg.system == "spin1" and task == "readout" else {}
    factory = _env_factory(cfg, task=task, **over)
    if cfg.system == "spinhalf":
        factory = functools.partial(spinhalf.SpinHalfEnv, cfg.spinhalf_config(task=task, track=True))
    env = factory()
    files = []
    if args.checkpoint:
        policy, _ = load_checkpoint(args.checkpoint).build()
        prof = deterministic_rollout(policy, env)
    elif args.profile:
        prof = _load_profile(args.profile)
        if cfg.system == "spinhalf":
            ts, sc = spinhalf.score_along(env, prof)
            env.history = [{"t": t, "omega": None, "score": s} for t, s in zip(ts, sc)]
        else:
            if prof.interaction_sign != 1:
                raise ConfigError("replaying through the environment needs interaction_sign +1; use scan")
            replay(env, prof)
    else:
        raise ConfigError("need --checkpoint or --profile")
    ppath = out / "profile.json"
    prof.save(ppath)
    header, rows = _history_rows(cfg, env)
    tpath = out / "trajectory.csv"
    write_csv(tpath, header, rows)
    files += [ppath, tpath]
    if task == "readout":
        if cfg.system == "spinhalf":
            c = cfg.spinhalf
            rep = spinhalf.sensitivity_Jy(spinhalf.generate_probe(c.N, 1.0, c.gen_omega, c.gen_tau), prof,
                                          spinhalf.readout_phase_grid(c.phi_max, c.n_phi), c.fd_step, c.sigma_n)
        else:
            e = cfg.episode_config()
            grid = e.phase_grid()
            rep = sensitivity_scan(_spin1_probe(cfg, "ground", cfg.episode.probe_q_hz), prof,
                                   grid[grid > 0], "rho0", e.sigma_n, fd_step=e.phi_step)
        rpath = out / "report.json"
        write_json(rpath, rep.to_dict())
        files.append(rpath)
    return files


def cmd_prepare(cfg, out, args):
    return _rollout(cfg, out, args, "twinfock" if cfg.system == "spinhalf" else "prepare")


def cmd_readout(cfg, out, args):
    return _rollout(cfg, out, args, "readout")


def cmd_scan(cfg: RunConfig, out: Path, args) -> list[Path]:
    s = cfg.scan
    phis = np.linspace(s.phi_start, s.phi_stop, s.n_phi)
    prof = _load_profile(args.profile)
    if cfg.system == "spinhalf":
        c = cfg.spinhalf
        probe = spinhalf.generate_probe(c.N, 1.0, c.gen_omega, c.gen_tau)
        rep = spinhalf.sensitivity_Jy(probe, prof, phis, s.fd_step, s.sigma_n)
    else:
        rep = sensitivity_scan(_spin1_probe(cfg, s.probe, s.probe_q_hz), prof, phis, s.detector, s.sigma_n, s.fd_step)
    j, c = out / "report.json", out / "scan.csv"
    write_json(j, rep.to_dict())
    write_csv(c, ["phi", "mean", "std", "dphi", "gain_db"], rep.rows().tolist())
    return [j, c]


class RolloutObjective:
    """Terminal reward of an open-loop action sequence (actions in [-1, 1])."""

    def __init__(self, factory):
        self.factory = factory
        self._env = None

    def __call__(self, x) -> float:
        if self._env is None:
            self._env = self.factory()
        self._env.reset()
        r = 0.0
        for a in x:
            _, r, done, _ = self._env.step([a])
        return r

    def __getstate__(self):
        return {"factory": self.factory, "_env": None}


def cmd_baseline(cfg: RunConfig, out: Path, args) -> list[Path]:
    b = cfg.baseline
    files = []
    if b.method == "tr":
        if cfg.system == "spinhalf":
            gen = ControlProfile(segments=((cfg.spinhalf.gen_omega, cfg.spinhalf.gen_tau),))
        elif args.profile:
            gen = _load_profile(args.profile)
        elif cfg.episode.generation:
            gen = ControlProfile(segments=tuple(cfg.to_units(cfg.episode.generation)))
        else:
            raise ConfigError("time reversal needs a generation profile (--profile or episode.generation)")
        tr = baselines.time_reversal_profile(gen)
        p = out / "best_profile.json"
        tr.save(p)
        files.append(p)
        if cfg.system == "spinhalf":
            env = spinhalf.SpinHalfEnv(cfg.spinhalf_config())
            ts, sc = spinhalf.score_along(env, tr)
            t = out / "score_along.csv"
            write_csv(t, ["chi_t", "score"], zip(ts, sc))
            files.append(t)
        return files
    factory = _env_factory(cfg)
    dim = factory().cfg.steps if cfg.system == "spinhalf" else factory().cfg.M
    if cfg.system == "spin1" and cfg.episode.variable_dt:
        raise ConfigError("sa/cma baselines use fixed step lengths; set episode.variable_dt: false")
    summary = []
    best_overall = None
    for k in range(b.trials):
        obj = baselines.BoxObjective.uniform(RolloutObjective(factory), dim, -1.0, 1.0, budget=b.budget,
                                             seed=cfg.seed + k)
        if b.method == "sa":
            res = baselines.simulated_annealing(obj)
        else:
            res = baselines.cma_es(obj, workers=cfg.workers)
        t = out / f"trace_{k}.csv"
        baselines.write_trace_csv(res.trace, t)
        files.append(t)
        summary.append({"trial": k, "seed": cfg.seed + k, "best": res.value, "evaluations": res.evaluations})
        if best_overall is None or res.value > best_overall.value:
            best_overall = res
    env = factory()
    RolloutObjective(lambda: env)(best_overall.x)
    p = out / "best_profile.json"
    env.profile().save(p)
    s = out / "summary.json"
    vals = [r["best"] for r in summary]
    write_json(s, {"method": b.method, "trials": summary, "mean": float(np.mean(vals)), "std": float(np.std(vals))})
    return files + [p, s]


def cmd_scatter(cfg: RunConfig, out: Path, args) -> list[Path]:
    if cfg.system != "spin1":
        raise ConfigError("scatter is defined for the spin1 readout task")
    if not args.checkpoint:
        raise ConfigError("need at least one --checkpoint")
    rows = []
    for path in args.checkpoint:
        ck = load_checkpoint(path)
        policy, _ = ck.build()
        env = SpinorEnv(cfg.episode_config(task="readout", track_gain=True))
        epoch = int(ck.meta.get("epoch", -1))
        pts = epoch_scatter(policy, env, cfg.scatter.n_samples, cfg.seed, tag=epoch + 1)
        rows += [(epoch, a, g) for a, g in pts]
    p = out / "scatter.csv"
    write_csv(p, ["epoch", "max_rho0", "max_gain_db"], rows)
    return [p]


def cmd_contours(cfg: RunConfig, out: Path, args) -> list[Path]:
    q = args.q if args.q is not None else 0.0
    p = out / "contours.csv"
    write_csv(p, ["rho0", "theta", "energy"], contour_rows(q, -1.0))
    return [p]


def cmd_show_config(cfg: RunConfig, out: Path, args) -> list[Path]:
    p = out / "config.yaml"
    p.write_text(dump_config(cfg))
    return [p]


COMMANDS = {
    "simulate": (cmd_simulate, "time series of rho0 and atom number under a q(t) schedule"),
    "prepare": (cmd_prepare, "roll out a preparation policy (spin1 prepare / spin-1/2 twin-Fock)"),
    "train": (cmd_train, "train a PPO policy on the configured task"),
    "readout": (cmd_readout, "roll out a readout policy or profile and report its sensitivity"),
    "scan": (cmd_scan, "phase-sensitivity scan of a probe with an optional readout profile"),
    "baseline": (cmd_baseline, "simulated annealing, CMA-ES or time-reversal readout"),
    "scatter": (cmd_scatter, "(max rho0, max gain) samples from stochastic policies"),
    "contours": (cmd_contours, "mean-field energy surface on a (rho0, theta) grid"),
    "show-config": (cmd_show_config, "write the fully resolved configuration"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nlreadout", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", type=Path, help="YAML run configuration")
        s.add_argument("--preset", help="named preset applied before --config")
        s.add_argument("--seed", type=int, help="master seed (overrides config)")
        s.add_argument("--workers", type=int, help="worker processes; never changes results")
        s.add_argument("--out", type=Path, required=True, help="output directory")
        s.add_argument("-v", "--verbose", action="store_true")
        if name in ("readout", "prepare", "scan", "baseline"):
            s.add_argument("--profile", type=Path, help="ControlProfile JSON")
        if name in ("readout", "prepare", "scatter"):
            s.add_argument("--checkpoint", type=Path, action="append" if name == "scatter" else None,
                           help="policy checkpoint" + (" (repeatable)" if name == "scatter" else ""))
        if name == "train":
            s.add_argument("--warm-start", type=Path, help="initialize networks from this checkpoint")
            s.add_argument("--resume", action="store_true", help="continue from checkpoints/last.ckpt in --out")
        if name == "contours":
            s.add_argument("--q", type=float, help="q in units of |c2|")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        over = {}
        if args.seed is not None:
            over["seed"] = args.seed
        if args.workers is not None:
            over["workers"] = args.workers
        cfg = load_config(args.config, args.preset, over)
    except (ValidationError, ValueError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"cannot read configuration: {e}", file=sys.stderr)
        return EXIT_IO
    except Exception as e:  # yaml parser errors
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    fn = COMMANDS[args.command][0]
    try:
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        files = fn(cfg, out, args)
        write_manifest(out, cfg, args.command, started, files)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (twa.DivergenceError, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
