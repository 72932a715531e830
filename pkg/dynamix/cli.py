"""
DYNAMIX — Command Line
=======================

Usage:
    python -m dynamix --mode train --preset sgd-100 --seed 0 --seed 1 --out runs/
    python -m dynamix --mode infer --checkpoint runs/train-seed0/policy.bin --out runs/
    python -m dynamix --mode baseline --batch-size 32 --batch-size 256 --out runs/
    python -m dynamix --mode report --out runs/

Exit codes: 0 success, 1 session aborted at runtime, 2 usage or configuration error.

Environment variables:
    DYNAMIX_LOG — log level (default: INFO)
"""

import argparse
import logging
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from .arbitrator import SessionConfig, run_local_session
from .config import (
    BATCH_MAX,
    BATCH_MIN,
    DEFAULT_K,
    DEFAULT_PRESET,
    DEFAULT_THRESHOLD,
    DEFAULT_TIMEOUT,
    INITIAL_BATCH,
    PRESETS,
    setup_logging,
)
from .errors import CheckpointError, ConfigError, ProtocolError, SessionAborted
from .metrics import STATE_DIM
from .policy import N_ACTIONS, PPOConfig, load_checkpoint
from .report import build_report
from .reward import Regime, RewardCoefficients
from .runlog import run_dir_name, write_run
from .simenv import default_cluster, load_cluster_config
from .worker import BatchSizeLimits

logger = logging.getLogger(__name__)

MODES = ("train", "infer", "baseline", "report")
DEFAULT_SWEEP = (32, 64, 128, 256)


@dataclass(frozen=True)
class RunConfig:
    mode: str
    cluster: object
    preset: str
    episodes: int
    steps: int
    regime: Regime
    coeffs: RewardCoefficients
    ppo: PPOConfig
    seeds: tuple
    out_dir: Path
    transport: str = "inproc"
    listen: str = "127.0.0.1:0"
    k: int = DEFAULT_K
    greedy: bool = False
    threshold: float = DEFAULT_THRESHOLD
    timeout: float = DEFAULT_TIMEOUT
    batch_sizes: tuple = ()
    checkpoint: Path = None
    scale_curve: float = 1.0
    config_path: Path = None

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("at least one --seed is required")
        for b in self.batch_sizes:
            if not BATCH_MIN <= b <= BATCH_MAX:
                raise ConfigError(f"--batch-size {b} outside [{BATCH_MIN}, {BATCH_MAX}]")
        if self.checkpoint is not None and not Path(self.checkpoint).exists():
            raise ConfigError(f"checkpoint {self.checkpoint} does not exist")

    def session(self, seed, mode, initial_batch=INITIAL_BATCH):
        return SessionConfig(
            episodes=self.episodes,
            steps=self.steps,
            k=self.k,
            timeout=self.timeout,
            limits=BatchSizeLimits(initial=initial_batch),
            regime=self.regime,
            coeffs=self.coeffs,
            ppo=self.ppo,
            mode=mode,
            greedy=self.greedy,
            seed=seed,
            threshold=self.threshold,
        )

    def snapshot(self, seed, batch_size=None):
        """Resolved configuration written to config.json."""
        cluster = replace(self.cluster, seed=seed)
        return {
            "mode": self.mode,
            "seed": seed,
            "seeds": list(self.seeds),
            "batch_size": batch_size,
            "preset": self.preset,
            "episodes": self.episodes,
            "steps": self.steps,
            "k": self.k,
            "regime": self.regime.value,
            "greedy": self.greedy,
            "threshold": self.threshold,
            "scale_curve": self.scale_curve,
            "transport": self.transport,
            "checkpoint": str(self.checkpoint) if self.checkpoint else None,
            "config_path": str(self.config_path) if self.config_path else None,
            "coeffs": asdict(self.coeffs),
            "ppo": {**asdict(self.ppo), "mode": self.ppo.mode.value},
            "cluster": cluster.to_dict(),
        }


# ══════════════════════════════════════════════
# Argument parsing
# ══════════════════════════════════════════════

def parse_coeff(text):
    name, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected NAME=VALUE, got {text!r}")
    try:
        return name.strip(), float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"coefficient {name!r}: {value!r} is not a number") from None


def build_parser():
    p = argparse.ArgumentParser(prog="dynamix", description="RL batch-size arbitration over a simulated BSP cluster")
    p.add_argument("--mode", choices=MODES, default="train")
    p.add_argument("--config", type=Path, help="cluster config JSON (default: built-in heterogeneous cluster)")
    p.add_argument("--workers", type=int, default=4, help="size of the built-in cluster when --config is absent")
    p.add_argument("--seed", type=int, action="append", help="repeatable; one run per seed")
    p.add_argument("--preset", choices=sorted(PRESETS), default=DEFAULT_PRESET)
    p.add_argument("--episodes", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--regime", choices=[r.value for r in Regime])
    p.add_argument("--k", type=int, default=DEFAULT_K, help="iterations per decision cycle")
    p.add_argument("--batch-size", type=int, action="append", help="baseline batch size; repeatable")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--out", type=Path, default=Path("runs"))
    p.add_argument("--transport", choices=["inproc", "socket"], default="inproc")
    p.add_argument("--listen", default="127.0.0.1:0", help="HOST:PORT for --transport socket")
    p.add_argument("--greedy", action="store_true", help="argmax actions instead of sampling")
    p.add_argument("--coeff", type=parse_coeff, action="append", default=[], metavar="NAME=VALUE")
    p.add_argument("--update-mode", choices=["simplified", "clipped"], default="simplified")
    p.add_argument("--scale-curve", type=float, default=1.0, help="multiply tau and a1 of the accuracy curve")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--timeout", type=float, default=DEFAULT_TIMEOUT)
    return p


def resolve(args):
    preset = PRESETS[args.preset]
    if args.config is not None:
        cluster = load_cluster_config(args.config)
    else:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cluster = default_cluster(args.workers)
    if args.scale_curve != 1.0:
        if not args.scale_curve > 0:
            raise ConfigError("--scale-curve must be > 0")
        cluster = replace(cluster, curve=cluster.curve.scaled(args.scale_curve))
    batch_sizes = tuple(args.batch_size or (DEFAULT_SWEEP if args.mode == "baseline" else ()))
    return RunConfig(
        mode=args.mode,
        cluster=cluster,
        preset=preset.name,
        episodes=preset.episodes if args.episodes is None else args.episodes,
        steps=preset.steps if args.steps is None else args.steps,
        regime=Regime(args.regime or preset.regime),
        coeffs=RewardCoefficients().with_overrides(dict(args.coeff)),
        ppo=PPOConfig(mode=args.update_mode),
        seeds=tuple(args.seed or [0]),
        out_dir=args.out,
        transport=args.transport,
        listen=args.listen,
        k=args.k,
        greedy=args.greedy,
        threshold=args.threshold,
        timeout=args.timeout,
        batch_sizes=batch_sizes,
        checkpoint=args.checkpoint,
        scale_curve=args.scale_curve,
        config_path=args.config,
    )


# ══════════════════════════════════════════════
# Commands
# ══════════════════════════════════════════════

def _run(run, seed, mode, params=None, batch_size=None):
    session = run.session(seed, mode, initial_batch=batch_size or INITIAL_BATCH)
    cluster = replace(run.cluster, seed=seed)
    summary, arbitrator = run_local_session(session, cluster, params=params,
                                            transport=run.transport, listen=run.listen)
    run_dir = run.out_dir / run_dir_name(run.mode, seed, batch_size)
    write_run(run_dir, run.snapshot(seed, batch_size), summary, arbitrator.message_log,
              params=arbitrator.params if mode == "train" else None)
    return summary


def load_policy(path):
    params = load_checkpoint(path)
    dims = params.dims
    if dims[0] != STATE_DIM or dims[-1] != N_ACTIONS:
        raise CheckpointError(f"{path}: policy maps {dims[0]} → {dims[-1]}, expected {STATE_DIM} → {N_ACTIONS}")
    return params


def cmd_train(run):
    warm = load_policy(run.checkpoint) if run.checkpoint else None
    for seed in run.seeds:
        summary = _run(run, seed, "train", params=warm.copy() if warm else None)
        logger.info("train seed=%d: %d episodes, policy v%d", seed, summary.episodes, summary.policy_version)
    return 0


def cmd_infer(run):
    if run.checkpoint is None:
        raise ConfigError("--mode infer needs --checkpoint")
    params = load_policy(run.checkpoint)
    for seed in run.seeds:
        summary = _run(run, seed, "infer", params=params.copy())
        logger.info("infer seed=%d: final accuracy %.4f", seed, summary.episode_records[-1].final_accuracy)
    return 0


def cmd_baseline(run):
    for batch_size in run.batch_sizes:
        for seed in run.seeds:
            summary = _run(run, seed, "baseline", batch_size=batch_size)
            logger.info("baseline B=%d seed=%d: final accuracy %.4f", batch_size, seed,
                        summary.episode_records[-1].final_accuracy)
    return 0


def cmd_report(out_dir):
    summary = build_report(out_dir)
    print(summary.to_string(index=False))
    return 0


def main(argv=None):
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.mode == "report":
            return cmd_report(args.out)
        run = resolve(args)
        return {"train": cmd_train, "infer": cmd_infer, "baseline": cmd_baseline}[run.mode](run)
    except (ConfigError, CheckpointError) as e:
        logger.error("%s", e)
        return 2
    except (SessionAborted, ProtocolError) as e:
        logger.error("%s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
