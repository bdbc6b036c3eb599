"""Command-line entry point.

Commands: `train`, `evaluate`, `baseline`, `kincheck`. Configuration is
a flat INI file with sections [run], [sim], [trainer], [trajectory],
[chain]; a named profile supplies the defaults, the file overlays them,
and repeated `--set section.key=value` flags override individual keys.
All output files are written atomically (temp file + rename).
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import io
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import kinematics as kin
from . import rl
from .twinsim import (
    SimConfig,
    TrajectorySource,
    TwinSimEnv,
    load_trajectory_csv,
    metrics_csv_text,
    run_baseline,
)

# --- profiles -----------------------------------------------------------------

_DESK = {
    "run": {"profile": "desk", "seed": "0", "out": "runs/desk"},
    "sim": {
        "slot_duration_ms": "1.0",
        "joint_count": "3",
        "recon_window": "2000",
        "predict_window": "200",
        "max_horizon": "50",
        "control_interval": "2",
        "render_interval": "17",
        "kp": "1.0",
        "kd": "0.0",
        "position_weight": "0.5",
        "orientation_weight": "0.5",
        "latency_mean_ms": "10.0",
        "latency_std_ms": "1.0",
        "episode_length": "2000",
        "predictor_kind": "linear_extrapolation",
        "pd_form": "incremental",
        "fit_window": "16",
        "initial_angles": "",
    },
    "trainer": {
        "discount": "0.99",
        "gae_lambda": "0.95",
        "clip_ratio": "0.2",
        "policy_lr": "3e-4",
        "value_lr": "3e-4",
        "cost_value_lr": "3e-4",
        "minibatch_size": "256",
        "epochs": "10",
        "cost_limit": "0.006",
        "total_steps": "300000",
        "hidden": "128 128",
        "worst_fraction": "0.05",
        "cvar_step_size": "2e-3",
        "cvar_iterations": "500",
        "entropy_coef": "0.0",
        "schedule_bias_init": "2.0",
        "stop_packet_ratio": "0.55",
        "stop_cvar_margin": "0.95",
        "stop_patience": "10",
        "min_episodes": "20",
    },
    "trajectory": {
        "kind": "synthetic_sines",
        "amplitudes": "0.7 0.55 0.45",
        "frequencies_hz": "0.13 0.21 0.34",
        "phases": "0.0 0.9 1.7",
        "offsets": "",
        "phase_jitter": "true",
        "csv": "",
    },
    "chain": {"kind": "planar3", "lengths": "0.5 0.35 0.25", "rows": ""},
}


def _profile_paper() -> dict:
    p = {section: dict(keys) for section, keys in _DESK.items()}
    p["run"]["profile"] = "paper"
    p["run"]["out"] = "runs/paper"
    p["sim"].update(
        {
            "joint_count": "7",
            "recon_window": "2000",
            "predict_window": "2000",
            "max_horizon": "500",
            "episode_length": "50000",
        }
    )
    p["trainer"].update({"cost_limit": "0.25", "total_steps": "2000000"})
    p["trajectory"].update(
        {
            "amplitudes": "0.6 0.5 0.45 0.4 0.35 0.3 0.25",
            "frequencies_hz": "0.11 0.17 0.23 0.29 0.31 0.37 0.41",
            "phases": "0.0 0.7 1.4 2.1 2.8 3.5 4.2",
        }
    )
    p["chain"] = {"kind": "panda7", "lengths": "", "rows": ""}
    return p


def _profile_smoke() -> dict:
    p = {section: dict(keys) for section, keys in _DESK.items()}
    p["run"]["profile"] = "smoke"
    p["run"]["out"] = "runs/smoke"
    p["sim"].update(
        {
            "recon_window": "600",
            "predict_window": "100",
            "max_horizon": "10",
            "episode_length": "600",
        }
    )
    p["trainer"].update(
        {
            "total_steps": "5000",
            "epochs": "4",
            "minibatch_size": "128",
            "min_episodes": "3",
            "stop_patience": "3",
        }
    )
    return p


PROFILES = {"desk": _DESK, "paper": _profile_paper, "smoke": _profile_smoke}


def profile_config(name: str) -> dict:
    if name not in PROFILES:
        raise ValueError(f"unknown profile {name!r} (choose from {sorted(PROFILES)})")
    base = PROFILES[name]
    if callable(base):
        return base()
    return {section: dict(keys) for section, keys in base.items()}


# --- config plumbing -----------------------------------------------------------


def parse_config_text(text: str) -> dict:
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_string(text)
    return {section: dict(parser.items(section)) for section in parser.sections()}


def dump_config(config: dict) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for section in sorted(config):
        parser[section] = {k: str(v) for k, v in sorted(config[section].items())}
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


def config_hash(config: dict) -> str:
    return hashlib.sha256(dump_config(config).encode()).hexdigest()


def merge_config(base: dict, overlay: dict) -> dict:
    merged = {section: dict(keys) for section, keys in base.items()}
    for section, keys in overlay.items():
        merged.setdefault(section, {}).update(keys)
    return merged


def apply_sets(config: dict, sets: list[str]) -> dict:
    out = {section: dict(keys) for section, keys in config.items()}
    for item in sets:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ValueError(f"--set expects section.key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        out.setdefault(section.strip(), {})[key.strip()] = value.strip()
    return out


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    return text.strip().lower() in {"1", "true", "yes", "on"}


def _optional_float(text: str) -> float | None:
    text = text.strip().lower()
    if text in {"", "none", "off"}:
        return None
    return float(text)


def build_sim_config(config: dict) -> SimConfig:
    s = config["sim"]
    init = s.get("initial_angles", "").strip()
    cfg = SimConfig(
        slot_duration_ms=float(s["slot_duration_ms"]),
        joint_count=int(s["joint_count"]),
        recon_window=int(s["recon_window"]),
        predict_window=int(s["predict_window"]),
        max_horizon=int(s["max_horizon"]),
        control_interval=int(s["control_interval"]),
        render_interval=int(s["render_interval"]),
        kp=float(s["kp"]),
        kd=float(s["kd"]),
        position_weight=float(s["position_weight"]),
        orientation_weight=float(s["orientation_weight"]),
        latency_mean_ms=float(s["latency_mean_ms"]),
        latency_std_ms=float(s["latency_std_ms"]),
        episode_length=int(s["episode_length"]),
        predictor_kind=s["predictor_kind"].strip(),
        pd_form=s["pd_form"].strip(),
        fit_window=int(s["fit_window"]),
        initial_angles=_floats(init) if init else None,
    )
    cfg.validate()
    return cfg


def build_trainer_config(config: dict) -> rl.TrainerConfig:
    t = config["trainer"]
    cfg = rl.TrainerConfig(
        discount=float(t["discount"]),
        gae_lambda=float(t["gae_lambda"]),
        clip_ratio=float(t["clip_ratio"]),
        policy_lr=float(t["policy_lr"]),
        value_lr=float(t["value_lr"]),
        cost_value_lr=float(t["cost_value_lr"]),
        minibatch_size=int(t["minibatch_size"]),
        epochs=int(t["epochs"]),
        cost_limit=float(t["cost_limit"]),
        total_steps=int(t["total_steps"]),
        hidden=_ints(t["hidden"]),
        worst_fraction=float(t["worst_fraction"]),
        cvar_step_size=float(t["cvar_step_size"]),
        cvar_iterations=int(t["cvar_iterations"]),
        entropy_coef=float(t["entropy_coef"]),
        schedule_bias_init=float(t["schedule_bias_init"]),
        stop_packet_ratio=_optional_float(t["stop_packet_ratio"]),
        stop_cvar_margin=float(t["stop_cvar_margin"]),
        stop_patience=int(t["stop_patience"]),
        min_episodes=int(t["min_episodes"]),
    )
    cfg.validate()
    return cfg


def build_arm(config: dict):
    c = config["chain"]
    kind = c["kind"].strip()
    if kind == "planar3":
        return kin.PlanarArm(_floats(c["lengths"]))
    if kind == "panda7":
        return kin.ChainArm(kin.panda7())
    if kind == "dh":
        rows = []
        for line in c["rows"].splitlines():
            line = line.strip()
            if not line:
                continue
            a, d, alpha = (float(v) for v in line.split())
            rows.append(kin.DHRow(a=a, d=d, alpha=alpha, joint_index=len(rows) + 1))
        if not rows:
            raise ValueError("chain.kind=dh needs chain.rows")
        return kin.ChainArm(kin.KinematicChain(tuple(rows)))
    raise ValueError(f"unknown chain kind {kind!r}")


def build_source(config: dict, sim: SimConfig) -> TrajectorySource:
    t = config["trajectory"]
    kind = t["kind"].strip()
    if kind == "synthetic_sines":
        offsets = t.get("offsets", "").strip()
        source = TrajectorySource(
            kind=kind,
            amplitudes=_floats(t["amplitudes"]),
            frequencies_hz=_floats(t["frequencies_hz"]),
            phases=_floats(t["phases"]),
            offsets=_floats(offsets) if offsets else None,
            phase_jitter=_bool(t.get("phase_jitter", "false")),
        )
    elif kind == "csv_playback":
        path = t.get("csv", "").strip()
        if not path:
            raise ValueError("trajectory.kind=csv_playback needs trajectory.csv")
        source = TrajectorySource(kind=kind, samples=load_trajectory_csv(path))
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    source.validate(sim)
    return source


def make_env_factory(sim: SimConfig, arm, source: TrajectorySource):
    def factory(seed: int) -> TwinSimEnv:
        return TwinSimEnv(sim, arm, source, seed=seed)

    return factory


# --- file helpers ---------------------------------------------------------------


def atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_save_checkpoint(path: Path, policy, value_r, value_c, digest: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".npz")
    os.close(fd)
    try:
        rl.save_checkpoint(tmp, policy, value_r, value_c, config_hash=digest)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def training_metrics_text(rows) -> str:
    lines = ["episode,avg_packet_rate,avg_error,cvar,branch"]
    for r in rows:
        lines.append(
            f"{r.episode},{repr(r.avg_packet_rate)},{repr(r.avg_error)},{repr(r.cvar)},{r.branch}"
        )
    return "\n".join(lines) + "\n"


def evaluation_csv_text(result: rl.EvalResult) -> str:
    lines = ["episode,packet_rate,mean_error,discounted_cost"]
    for ep, rate, err, cost in result.episode_rows:
        lines.append(f"{ep},{repr(rate)},{repr(err)},{repr(cost)}")
    return "\n".join(lines) + "\n"


def ccdf_csv_text(result: rl.EvalResult) -> str:
    lines = ["cost,ccdf"]
    for cost, frac in result.ccdf:
        lines.append(f"{repr(cost)},{repr(frac)}")
    return "\n".join(lines) + "\n"


# --- commands --------------------------------------------------------------------


def load_effective_config(args) -> dict:
    config = profile_config(args.profile)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        config = merge_config(config, parse_config_text(path.read_text()))
    if args.set:
        config = apply_sets(config, args.set)
    if args.seed is not None:
        config["run"]["seed"] = str(args.seed)
    if args.out is not None:
        config["run"]["out"] = args.out
    return config


def cmd_train(args) -> int:
    config = load_effective_config(args)
    sim = build_sim_config(config)
    trainer = build_trainer_config(config)
    arm = build_arm(config)
    source = build_source(config, sim)
    seed = int(config["run"]["seed"])
    out = Path(config["run"]["out"])
    digest = config_hash(config)

    started = time.time()
    result = rl.train(make_env_factory(sim, arm, source), trainer, seed)
    elapsed = time.time() - started

    atomic_write_text(out / "config_used.ini", dump_config(config))
    atomic_write_text(out / "training_metrics.csv", training_metrics_text(result.rows))
    atomic_save_checkpoint(out / "checkpoint.npz", result.policy, result.value_r, result.value_c, digest)

    last = result.rows[-1]
    window = result.rows[-min(len(result.rows), trainer.stop_patience) :]
    recent_rate = sum(r.avg_packet_rate for r in window) / len(window)
    bound = trainer.cost_limit / (1.0 - trainer.discount)
    print(f"episodes: {len(result.rows)}  env steps: {result.steps}  wall: {elapsed:.1f}s")
    print(f"final avg packet rate: {recent_rate:.1f} packets/s "
          f"({recent_rate / result.baseline_packet_rate:.1%} of baseline {result.baseline_packet_rate:.0f})")
    print(f"final avg error: {last.avg_error:.6f}")
    print(f"final batch cvar: {last.cvar:.4f} (bound {bound:.4f})")
    print(f"outputs in {out}")
    return 0


def cmd_evaluate(args) -> int:
    config = load_effective_config(args)
    sim = build_sim_config(config)
    trainer = build_trainer_config(config)
    arm = build_arm(config)
    source = build_source(config, sim)
    out = Path(config["run"]["out"])
    seed = int(config["run"]["seed"])

    checkpoint = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.npz"
    if not checkpoint.exists():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    policy, _, _, meta = rl.load_checkpoint(checkpoint)
    env_factory = make_env_factory(sim, arm, source)
    probe = env_factory(0)
    if (
        meta["obs_dim"] != probe.observation_size
        or meta["joint_count"] != sim.joint_count
        or meta["horizon"] != sim.max_horizon
    ):
        print(
            f"checkpoint/config mismatch: checkpoint has obs_dim={meta['obs_dim']}, "
            f"joints={meta['joint_count']}, horizon={meta['horizon']}; config needs "
            f"obs_dim={probe.observation_size}, joints={sim.joint_count}, horizon={sim.max_horizon}",
            file=sys.stderr,
        )
        return 2

    result = rl.evaluate(policy, env_factory, args.episodes, seed, trainer.cost_limit, trainer.discount)
    atomic_write_text(out / "evaluation.csv", evaluation_csv_text(result))
    atomic_write_text(out / "ccdf.csv", ccdf_csv_text(result))
    summary = (
        "key,value\n"
        f"episodes,{args.episodes}\n"
        f"mean_packet_rate,{repr(result.mean_packet_rate)}\n"
        f"mean_error,{repr(result.mean_error)}\n"
        f"bound,{repr(result.bound)}\n"
        f"satisfied_fraction,{repr(result.satisfied_fraction)}\n"
    )
    atomic_write_text(out / "evaluation_summary.csv", summary)
    print(f"episodes: {args.episodes}")
    print(f"mean packet rate: {result.mean_packet_rate:.1f} packets/s")
    print(f"mean error: {result.mean_error:.6f}")
    print(f"satisfied fraction (discounted cost <= {result.bound:.4f}): {result.satisfied_fraction:.4f}")
    return 0


def cmd_baseline(args) -> int:
    config = load_effective_config(args)
    sim = build_sim_config(config)
    arm = build_arm(config)
    source = build_source(config, sim)
    seed = int(config["run"]["seed"])
    out = Path(config["run"]["out"])

    result = run_baseline(sim, arm, source, seed=seed)
    atomic_write_text(out / "baseline_metrics.csv", metrics_csv_text(result.rows))
    print(f"packet rate: {result.packet_rate:.1f} packets/s")
    print(f"mean error: {result.mean_error:.6f}")
    print(f"outputs in {out}")
    return 0


def cmd_kincheck(args) -> int:
    name = args.chain
    trials = 200
    rng = np.random.default_rng(int(args.seed) if args.seed is not None else 0)
    if name == "planar3":
        lengths = (0.5, 0.35, 0.25)
        worst = 0.0
        for _ in range(trials):
            q = rng.uniform(-np.pi, np.pi, 3)
            jac = kin.planar3_jacobian(lengths, q)
            if not np.array_equal(jac[2], np.ones(3)):
                print("FAIL: heading row is not exactly (1,1,1)", file=sys.stderr)
                return 1
            h = 1e-6
            for i in range(3):
                qp, qm = q.copy(), q.copy()
                qp[i] += h
                qm[i] -= h
                fd = (
                    np.array(kin.planar3_fk(lengths, qp)) - np.array(kin.planar3_fk(lengths, qm))
                ) / (2 * h)
                worst = max(worst, float(np.abs(jac[:, i] - fd).max()))
        print(f"planar3: {trials} random configurations, max |jacobian - fd| = {worst:.3e}")
        if worst >= 1e-6:
            print("FAIL: finite-difference mismatch", file=sys.stderr)
            return 1
        print("PASS")
        return 0

    if name == "panda7":
        chain = kin.panda7()
    elif name == "config":
        config = load_effective_config(args)
        arm = build_arm(config)
        if not isinstance(arm, kin.ChainArm):
            print("kincheck config: the configured chain is not a DH chain", file=sys.stderr)
            return 2
        chain = arm.chain
    else:
        print(f"unknown chain name {name!r} (use panda7, planar3, or config)", file=sys.stderr)
        return 2

    worst = 0.0
    h = 1e-6
    for _ in range(trials):
        q = rng.uniform(-np.pi, np.pi, chain.joint_count)
        jac = kin.geometric_jacobian(chain, q)[:3]
        for i in range(chain.joint_count):
            qp, qm = q.copy(), q.copy()
            qp[i] += h
            qm[i] -= h
            fd = (
                kin.forward_kinematics(chain, qp).position
                - kin.forward_kinematics(chain, qm).position
            ) / (2 * h)
            worst = max(worst, float(np.abs(jac[:, i] - fd).max()))
    print(f"{name}: {trials} random configurations, max |jacobian - fd| = {worst:.3e}")
    if worst >= 1e-5:
        print("FAIL: finite-difference mismatch", file=sys.stderr)
        return 1
    print("PASS")
    return 0


# --- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file overlaying the profile")
    common.add_argument("--seed", type=int, help="run seed (overrides config)")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--profile", default="desk", choices=sorted(PROFILES), help="base profile")
    common.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config key (repeatable)",
    )

    parser = argparse.ArgumentParser(prog="armtwin", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train the constrained scheduler/predictor policy")
    ev = sub.add_parser("evaluate", parents=[common], help="greedy evaluation of a checkpoint")
    ev.add_argument("--checkpoint", help="checkpoint path (default: <out>/checkpoint.npz)")
    ev.add_argument("--episodes", type=int, default=200)
    sub.add_parser("baseline", parents=[common], help="all-joints-every-slot baseline episode")
    kc = sub.add_parser("kincheck", parents=[common], help="finite-difference jacobian self-check")
    kc.add_argument("chain", help="panda7, planar3, or config")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "train": cmd_train,
        "evaluate": cmd_evaluate,
        "baseline": cmd_baseline,
        "kincheck": cmd_kincheck,
    }
    try:
        return handlers[args.command](args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
