"""
DYNAMIX: Static Batch-Size Trade-off
=====================================
Sweeps fixed per-worker batch sizes over the simulated cluster at an equal
per-worker sample budget and records, for each size:

  - terminal noise-free accuracy (statistical efficiency)
  - simulated wall time to exhaust the budget (hardware efficiency)
  - time at which the smoothed accuracy first reaches the threshold

Expected shape: accuracy falls and wall time falls as the batch size grows,
so no single static size is best on both axes.

Usage:
    python -m analysis.static_tradeoff [--workers 4] [--budget 400000] [--seed 0]

Environment variables:
    DYNAMIX_RESULTS_DIR — output directory for CSVs (default: ./results)
    DYNAMIX_LOG         — log level (default: INFO)
"""

import argparse
import os

import numpy as np
import pandas as pd

from dynamix.config import BATCH_MAX, BATCH_MIN, RESULTS_DIR, SMOOTHING_WINDOW, setup_logging
from dynamix.metrics import time_to_threshold
from dynamix.simenv import ClusterSimulator, default_cluster, run_to_sample_budget

BATCH_SIZES = [32, 64, 128, 256, 512, 1024]
THRESHOLDS = [0.5, 0.6, 0.7]


# ══════════════════════════════════════════════════════
# 1. Sweep
# ══════════════════════════════════════════════════════

def threshold_times(config, batch_size, budget, thresholds):
    """Smoothed time-to-threshold for each threshold within one budget-long static run."""
    sim = ClusterSimulator(config)
    sizes = {wid: batch_size for wid in config.worker_ids}
    times, acc = [], []
    for _ in range(int(np.ceil(budget / batch_size))):
        out = sim.step(sizes)
        times.append(sim.state.sim_time)
        acc.append(float(np.mean([o.curve_accuracy for o in out])))
    return {f"t_{th:.2f}": time_to_threshold(times, acc, th, SMOOTHING_WINDOW) for th in thresholds}


def run_sweep(config, budget, batch_sizes=BATCH_SIZES, thresholds=THRESHOLDS):
    rows = []
    for b in batch_sizes:
        accuracy, wall = run_to_sample_budget(config, b, budget)
        row = {"batch_size": b, "final_accuracy": accuracy, "sim_wall_time": wall,
               "iterations": int(np.ceil(budget / b))}
        row.update(threshold_times(config, b, budget, thresholds))
        rows.append(row)
        print(f"  B={b:5d}  accuracy={accuracy:.4f}  wall={wall:9.1f}s")
    return pd.DataFrame(rows)


# ══════════════════════════════════════════════════════
# 2. Main
# ══════════════════════════════════════════════════════

def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[1])
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--budget", type=int, default=400_000, help="samples per worker")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    setup_logging()

    print("=" * 60)
    print("DYNAMIX — Static Batch-Size Trade-off")
    print(f"{args.workers} workers, {args.budget} samples per worker, batch sizes {BATCH_MIN}..{BATCH_MAX}")
    print("=" * 60)

    config = default_cluster(args.workers, seed=args.seed)
    frame = run_sweep(config, args.budget)

    os.makedirs(RESULTS_DIR, exist_ok=True)
    out = os.path.join(RESULTS_DIR, "static_tradeoff.csv")
    frame.to_csv(out, index=False, float_format="%.6g")
    print(f"\n  Saved: {out}")

    acc_falls = bool(np.all(np.diff(frame["final_accuracy"]) <= 1e-12))
    time_falls = bool(np.all(np.diff(frame["sim_wall_time"]) < 0))
    print(f"\n  accuracy non-increasing in B : {'PASS' if acc_falls else 'FAIL'}")
    print(f"  wall time decreasing in B    : {'PASS' if time_falls else 'FAIL'}")
    print("=" * 60)
    print(f"TRADE-OFF: {'PRESENT ✓' if acc_falls and time_falls else 'ABSENT ✗'}")
    print("=" * 60)
    return 0 if acc_falls and time_falls else 1


if __name__ == "__main__":
    raise SystemExit(main())
