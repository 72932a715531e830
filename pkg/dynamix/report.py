"""
DYNAMIX — Run Reports
======================

Aggregates run directories (see runlog) into plot-ready tables under
<out>/report/:

    summary.csv           one row per run: final accuracy, time-to-threshold,
                          reward of first/last episodes, quartile batch means
    reward_trend.csv      per run and episode: mean/median reward and a
                          5-episode rolling mean
    batch_trajectory.csv  per run, episode and step: mean/std batch size over workers

Inputs are only read.
"""

import json
import logging
from pathlib import Path

import numpy as np
import pandas as pd

from .config import SMOOTHING_WINDOW
from .errors import ConfigError
from .runlog import find_runs, load_manifest, missing_files

logger = logging.getLogger(__name__)


def load_run(run_dir):
    run_dir = Path(run_dir)
    config = json.loads((run_dir / "config.json").read_text(encoding="utf-8"))
    return {
        "name": run_dir.name,
        "manifest": load_manifest(run_dir),
        "config": config,
        "episodes": pd.read_csv(run_dir / "episodes.csv"),
        "steps": pd.read_json(run_dir / "steps.jsonl", lines=True),
    }


def summarize_run(run):
    ep = run["episodes"]
    last = ep.iloc[-1]
    head = ep.head(min(5, len(ep)))
    tail = ep.tail(min(5, len(ep)))
    versions = ep["policy_version"].to_numpy()
    return {
        "run": run["name"],
        "mode": run["manifest"]["mode"],
        "seed": run["config"].get("seed"),
        "batch_size": run["config"].get("batch_size"),
        "episodes": len(ep),
        "final_accuracy": float(last["final_accuracy"]),
        "time_to_threshold": float(last["time_to_threshold"]),
        "sim_wall_time": float(last["sim_wall_time"]),
        "first5_median_reward": float(head["median_reward"].median()),
        "last5_median_reward": float(tail["median_reward"].median()),
        "q1_batch_mean": float(last["q1_batch_mean"]),
        "q4_batch_mean": float(last["q4_batch_mean"]),
        "policy_version": int(versions[-1]),
        "versions_monotone": bool(np.all(np.diff(versions) >= 0)),
        "decision_latency_ratio": run["manifest"].get("decision_latency_ratio"),
    }


def reward_trend(run):
    ep = run["episodes"][["episode", "mean_reward", "median_reward"]].copy()
    ep["rolling_mean_reward"] = ep["mean_reward"].rolling(SMOOTHING_WINDOW, min_periods=1).mean()
    ep.insert(0, "run", run["name"])
    return ep


def batch_trajectory(run):
    grouped = (
        run["steps"].groupby(["episode", "step"])["batch_size"]
        .agg(batch_mean="mean", batch_std="std")
        .reset_index()
    )
    grouped["batch_std"] = grouped["batch_std"].fillna(0.0)
    grouped.insert(0, "run", run["name"])
    return grouped


def build_report(out_dir):
    """Write the report tables and return the summary frame; ConfigError if artifacts are missing."""
    out_dir = Path(out_dir)
    runs = find_runs(out_dir)
    if not runs:
        raise ConfigError(f"no run directories under {out_dir}")
    absent = {r.name: missing_files(r) for r in runs}
    absent = {name: files for name, files in absent.items() if files}
    if absent:
        detail = "; ".join(f"{name}: {', '.join(files)}" for name, files in sorted(absent.items()))
        raise ConfigError(f"missing artifacts: {detail}")

    loaded = [load_run(r) for r in runs]
    summary = pd.DataFrame([summarize_run(r) for r in loaded])
    trend = pd.concat([reward_trend(r) for r in loaded], ignore_index=True)
    trajectory = pd.concat([batch_trajectory(r) for r in loaded], ignore_index=True)

    report_dir = out_dir / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    summary.to_csv(report_dir / "summary.csv", index=False)
    trend.to_csv(report_dir / "reward_trend.csv", index=False)
    trajectory.to_csv(report_dir / "batch_trajectory.csv", index=False)
    logger.info("report over %d run(s) written to %s", len(runs), report_dir)
    return summary
