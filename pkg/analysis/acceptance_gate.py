"""
DYNAMIX: Acceptance Gate
=========================
Directional checks of the arbitrator against static batch sizes on the
simulated cluster. Each part prints its numbers and a PASS/FAIL verdict:

  3. Learning signal   — reward of the last 5 episodes beats the first 5 by
                         ≥ 20% on every training seed; cross-worker reward
                         variance shrinks
  4. Adaptive vs static — on held-out seeds the trained policy matches the
                         best static accuracy and is within 1.1× of the
                         fastest static time-to-threshold (≥ 7/10 seeds);
                         the time check runs with k=256 so the threshold is
                         reachable, and a seed where no static size reaches
                         it is reported as not evaluable
  5. Three phases      — first-quartile mean batch size above the last
                         quartile (≥ 8/10 seeds)
  6. Scalability       — seed-averaged policy accuracy within 1 point across
                         8/16/32 workers and ≥ best static at each scale
  7. Transfer          — policy trained on the default curve, frozen, beats
                         the best static size on a curve with τ and a1
                         scaled ×1.5 (≥ 6/10 seeds)
  8. Overhead and determinism — socket session completes with decision
                         latency < 1% of the simulated cycle; identical seeds
                         give identical episode tables

Usage:
    python -m analysis.acceptance_gate [--quick] [--parts 3 4 5 6 7 8]

Environment variables:
    DYNAMIX_RESULTS_DIR — output directory for CSVs (default: ./results)
    DYNAMIX_LOG         — log level (default: INFO; WARNING keeps the gate output readable)
"""

import argparse
import os
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from dynamix.arbitrator import SessionConfig, run_local_session
from dynamix.config import DEFAULT_THRESHOLD, RESULTS_DIR, setup_logging
from dynamix.simenv import default_cluster
from dynamix.worker import BatchSizeLimits

STATIC_SIZES = (32, 64, 128, 256)
TRAIN_SEEDS = (0, 1, 2)
HELDOUT_SEEDS = tuple(range(100, 110))
SCALES = (8, 16, 32)
SCALE_SEEDS = HELDOUT_SEEDS[:3]
TIME_K = 256
TRANSFER_FACTOR = 1.5


@dataclass(frozen=True)
class GateSchedule:
    episodes: int = 20
    steps: int = 100
    workers: int = 4
    k: int = 8


FULL = GateSchedule()
QUICK = GateSchedule(episodes=8, steps=30, workers=4, k=4)


def _session(schedule, seed, mode, batch=None, episodes=None, threshold=DEFAULT_THRESHOLD):
    return SessionConfig(
        episodes=episodes or (schedule.episodes if mode == "train" else 1),
        steps=schedule.steps,
        k=schedule.k,
        mode=mode,
        seed=seed,
        limits=BatchSizeLimits(initial=batch) if batch else BatchSizeLimits(),
        threshold=threshold,
        timeout=120.0,
    )


def _ttt(value):
    return np.inf if np.isnan(value) else value


def _save(frame, name):
    os.makedirs(RESULTS_DIR, exist_ok=True)
    out = os.path.join(RESULTS_DIR, name)
    frame.to_csv(out, index=False, float_format="%.6g")
    print(f"  Saved: {out}")


# ══════════════════════════════════════════════════════
# 1. Training and evaluation runs
# ══════════════════════════════════════════════════════

def train_policy(schedule, seed, n_workers=None):
    cluster = default_cluster(n_workers or schedule.workers, seed=seed)
    summary, arb = run_local_session(_session(schedule, seed, "train"), cluster)
    return arb.params, summary


def evaluate(schedule, params, seed, cluster, threshold):
    """One frozen-policy episode and the static sweep on the same cluster and seed."""
    cluster = replace(cluster, seed=seed)
    summary, _ = run_local_session(_session(schedule, seed, "infer", threshold=threshold), cluster,
                                   params=params.copy())
    policy = summary.episode_records[-1]
    row = {
        "seed": seed,
        "policy_accuracy": policy.final_accuracy,
        "policy_ttt": policy.time_to_threshold,
        "policy_q1_batch": policy.quartile_batch_mean[0],
        "policy_q4_batch": policy.quartile_batch_mean[3],
    }
    for b in STATIC_SIZES:
        static, _ = run_local_session(_session(schedule, seed, "baseline", batch=b, threshold=threshold), cluster)
        rec = static.episode_records[-1]
        row[f"static{b}_accuracy"] = rec.final_accuracy
        row[f"static{b}_ttt"] = rec.time_to_threshold
    row["best_static_accuracy"] = max(row[f"static{b}_accuracy"] for b in STATIC_SIZES)
    row["fastest_static_ttt"] = min(_ttt(row[f"static{b}_ttt"]) for b in STATIC_SIZES)
    return row


# ══════════════════════════════════════════════════════
# 2. Gate parts
# ══════════════════════════════════════════════════════

def part_learning_signal(trained):
    rows, ok = [], True
    for seed, summary in trained.items():
        ep = summary.episodes_frame()
        first = float(ep["median_reward"].head(5).median())
        last = float(ep["median_reward"].tail(5).median())
        var_first = float((ep["std_reward"].head(5) ** 2).mean())
        var_last = float((ep["std_reward"].tail(5) ** 2).mean())
        improved = last >= first + 0.2 * abs(first)
        settled = var_last < var_first
        ok = ok and improved and settled
        rows.append({"seed": seed, "first5_median": first, "last5_median": last,
                     "first5_var": var_first, "last5_var": var_last})
        print(f"  seed={seed}  reward {first:+.3f} → {last:+.3f} {'PASS' if improved else 'FAIL'}  "
              f"variance {var_first:.4f} → {var_last:.4f} {'PASS' if settled else 'FAIL'}")
    _save(pd.DataFrame(rows), "gate_learning_signal.csv")
    return ok


def part_adaptive_vs_static(evals, time_evals):
    wins, evaluable = 0, 0
    for r, t in zip(evals, time_evals):
        acc_ok = r["policy_accuracy"] >= r["best_static_accuracy"]
        fastest = t["fastest_static_ttt"]
        policy_ttt = _ttt(t["policy_ttt"])
        if np.isinf(fastest):
            time_ok, verdict = True, "not evaluable (no static size reaches the threshold)"
        else:
            evaluable += 1
            time_ok = policy_ttt <= 1.1 * fastest
            verdict = f"{policy_ttt:.1f} vs {fastest:.1f} {'PASS' if time_ok else 'FAIL'}"
        wins += acc_ok and time_ok
        print(f"  seed={r['seed']}  accuracy {r['policy_accuracy']:.4f} vs {r['best_static_accuracy']:.4f}  "
              f"ttt@k={TIME_K} {verdict}")
    print(f"  wins: {wins}/{len(evals)}  (need ≥ 7/10)  time check evaluable on {evaluable}/{len(evals)} seeds")
    return evaluable > 0 and wins >= int(np.ceil(0.7 * len(evals)))


def part_three_phase(evals):
    shrinking = sum(r["policy_q1_batch"] > r["policy_q4_batch"] for r in evals)
    print(f"  first-quartile batch > last-quartile batch: {shrinking}/{len(evals)}  (need ≥ 8/10)")
    return shrinking >= int(np.ceil(0.8 * len(evals)))


def part_scalability(schedule, params, threshold, seeds=SCALE_SEEDS):
    rows = []
    for n in SCALES:
        for seed in seeds:
            r = evaluate(schedule, params, seed, default_cluster(n), threshold)
            r["workers"] = n
            rows.append(r)
    frame = pd.DataFrame(rows)
    _save(frame, "gate_scalability.csv")
    means = frame.groupby("workers")[["policy_accuracy", "best_static_accuracy"]].mean()
    for n, m in means.iterrows():
        print(f"  N={n:3d}  policy {m['policy_accuracy']:.4f}  best static {m['best_static_accuracy']:.4f}  "
              f"(mean of {len(seeds)} seeds)")
    spread = means["policy_accuracy"].max() - means["policy_accuracy"].min()
    beats = bool((means["policy_accuracy"] >= means["best_static_accuracy"]).all())
    print(f"  policy accuracy spread across scales: {100 * spread:.2f} points  "
          f"{'PASS' if spread <= 0.01 else 'FAIL'}")
    print(f"  policy ≥ best static at every scale: {'PASS' if beats else 'FAIL'}")
    return spread <= 0.01 and beats


def part_transfer(schedule, params, seeds, threshold):
    base = default_cluster(schedule.workers)
    shifted = replace(base, curve=base.curve.scaled(TRANSFER_FACTOR))
    rows = [evaluate(schedule, params, s, shifted, threshold) for s in seeds]
    frame = pd.DataFrame(rows)
    _save(frame, "gate_transfer.csv")
    wins = int((frame["policy_accuracy"] > frame["best_static_accuracy"]).sum())
    print(f"  policy beats best static on shifted curve: {wins}/{len(rows)}  (need ≥ 6/10)")
    return wins >= int(np.ceil(0.6 * len(rows)))


def part_overhead(schedule, params):
    cluster = default_cluster(4, seed=HELDOUT_SEEDS[0])
    config = _session(schedule, HELDOUT_SEEDS[0], "infer")
    summary, _ = run_local_session(config, cluster, params=params.copy(), transport="socket")
    fast = summary.latency_ratio < 0.01
    print(f"  socket session: mean latency {1e3 * summary.mean_latency:.3f} ms, "
          f"ratio to simulated cycle {summary.latency_ratio:.2e}  {'PASS' if fast else 'FAIL'}")

    a, _ = run_local_session(config, cluster, params=params.copy())
    b, _ = run_local_session(config, cluster, params=params.copy())
    same = a.episodes_frame().equals(b.episodes_frame()) and a.step_rows == b.step_rows
    print(f"  identical seeds give identical episode tables: {'PASS' if same else 'FAIL'}")
    return fast and same


# ══════════════════════════════════════════════════════
# 3. Main
# ══════════════════════════════════════════════════════

def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[1])
    p.add_argument("--quick", action="store_true", help="short schedule and fewer seeds (smoke run)")
    p.add_argument("--parts", type=int, nargs="+", default=[3, 4, 5, 6, 7, 8])
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    args = p.parse_args(argv)
    setup_logging(os.environ.get("DYNAMIX_LOG", "WARNING"))

    schedule = QUICK if args.quick else FULL
    train_seeds = TRAIN_SEEDS[:1] if args.quick else TRAIN_SEEDS
    heldout = HELDOUT_SEEDS[:3] if args.quick else HELDOUT_SEEDS

    print("=" * 60)
    print("DYNAMIX — Acceptance Gate")
    print(f"{schedule.workers} workers, {schedule.episodes} episodes × {schedule.steps} steps, k={schedule.k}")
    print("=" * 60)

    trained = {}
    for seed in train_seeds:
        params, summary = train_policy(schedule, seed)
        trained[seed] = summary
        if seed == train_seeds[0]:
            policy = params
        print(f"  trained seed={seed}: policy v{params.version}")

    gates = {}
    evals = None
    if {4, 5} & set(args.parts):
        base = default_cluster(schedule.workers)
        evals = [evaluate(schedule, policy, s, base, args.threshold) for s in heldout]
        _save(pd.DataFrame(evals), "gate_adaptive_vs_static.csv")
    time_evals = None
    if 4 in args.parts:
        timed = replace(schedule, k=TIME_K)
        time_evals = [evaluate(timed, policy, s, base, args.threshold) for s in heldout]
        _save(pd.DataFrame(time_evals), "gate_time_to_threshold.csv")

    if 3 in args.parts:
        print("\n[PART 3] Learning signal")
        print("-" * 40)
        gates[3] = part_learning_signal(trained)
    if 4 in args.parts:
        print("\n[PART 4] Adaptive vs static")
        print("-" * 40)
        gates[4] = part_adaptive_vs_static(evals, time_evals)
    if 5 in args.parts:
        print("\n[PART 5] Three-phase adaptation")
        print("-" * 40)
        gates[5] = part_three_phase(evals)
    if 6 in args.parts:
        print("\n[PART 6] Scalability")
        print("-" * 40)
        gates[6] = part_scalability(schedule, policy, args.threshold, heldout[:1] if args.quick else SCALE_SEEDS)
    if 7 in args.parts:
        print("\n[PART 7] Transfer")
        print("-" * 40)
        gates[7] = part_transfer(schedule, policy, heldout, args.threshold)
    if 8 in args.parts:
        print("\n[PART 8] Overhead and determinism")
        print("-" * 40)
        gates[8] = part_overhead(schedule, policy)

    print("\n" + "=" * 60)
    for part, ok in gates.items():
        print(f"  part {part}: {'PASSED ✓' if ok else 'FAILED ✗'}")
    overall = all(gates.values())
    print(f"ACCEPTANCE GATE: {'PASSED ✓' if overall else 'FAILED ✗'}")
    print("=" * 60)
    return 0 if overall else 1


if __name__ == "__main__":
    raise SystemExit(main())
