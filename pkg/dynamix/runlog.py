"""
DYNAMIX — Run Directory Artifacts
==================================

One directory per (mode, batch size, seed):

    config.json         resolved run configuration (seed list included)
    manifest.json       schema version, config hash, code hash, file list
    episodes.csv        one row per episode (EpisodeRecord columns)
    worker_rewards.csv  cumulative reward per (episode, worker), long format
    steps.jsonl         one line per (episode, step, worker); no wall-clock fields
    events.jsonl        one line per protocol message: timestamp, kind, payload digest
    policy.bin          final policy checkpoint (train runs)

Everything except events.jsonl and manifest.json is a function of the
configuration alone, so identical seeds give byte-identical files.
"""

import hashlib
import json
import logging
from pathlib import Path

from .errors import ConfigError
from .policy import save_checkpoint
from .protocol import encode_body

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
FLOAT_FORMAT = "%.10g"

EPISODE_COLUMNS = (
    "episode", "mean_reward", "median_reward", "std_reward", "sim_wall_time",
    "final_accuracy", "time_to_threshold",
    "q1_batch_mean", "q1_batch_std", "q2_batch_mean", "q2_batch_std",
    "q3_batch_mean", "q3_batch_std", "q4_batch_mean", "q4_batch_std",
    "policy_version",
)
STEP_FIELDS = (
    "episode", "step", "worker_id", "batch_size", "delta", "reward",
    "A_bar", "T_iter", "curve_accuracy", "sim_time",
)
REQUIRED_FILES = ("config.json", "manifest.json", "episodes.csv", "worker_rewards.csv", "steps.jsonl")


def run_dir_name(mode, seed, batch_size=None):
    if batch_size is not None:
        return f"{mode}-b{batch_size}-seed{seed}"
    return f"{mode}-seed{seed}"


def canonical_json(doc):
    return json.dumps(doc, sort_keys=True, indent=2, allow_nan=False) + "\n"


def config_hash(doc):
    return hashlib.sha256(canonical_json(doc).encode("utf-8")).hexdigest()


def code_hash():
    """sha256 over the package sources, in sorted path order."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode("utf-8"))
        h.update(path.read_bytes())
    return h.hexdigest()


def write_steps(path, rows):
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps({k: row[k] for k in STEP_FIELDS}, sort_keys=True) + "\n")


def write_events(path, message_log):
    with open(path, "w", encoding="utf-8") as f:
        for entry in message_log:
            m = entry.message
            f.write(json.dumps({
                "ts": entry.timestamp,
                "direction": entry.direction,
                "kind": m.kind.value,
                "worker_id": m.worker_id,
                "episode": m.episode,
                "step": m.step,
                "digest": hashlib.sha256(encode_body(m)).hexdigest()[:16],
            }, sort_keys=True) + "\n")


def write_run(run_dir, config_doc, summary, message_log=(), params=None):
    """Persist one session's artifacts; returns the run directory."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    files = []

    (run_dir / "config.json").write_text(canonical_json(config_doc), encoding="utf-8")
    files.append("config.json")

    episodes = summary.episodes_frame().reindex(columns=list(EPISODE_COLUMNS))
    episodes.to_csv(run_dir / "episodes.csv", index=False, float_format=FLOAT_FORMAT)
    summary.worker_rewards_frame().to_csv(run_dir / "worker_rewards.csv", index=False, float_format=FLOAT_FORMAT)
    write_steps(run_dir / "steps.jsonl", summary.step_rows)
    files += ["episodes.csv", "worker_rewards.csv", "steps.jsonl"]

    if message_log:
        write_events(run_dir / "events.jsonl", message_log)
        files.append("events.jsonl")
    if params is not None:
        save_checkpoint(params, run_dir / "policy.bin")
        files.append("policy.bin")

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "mode": summary.mode,
        "config_hash": config_hash(config_doc),
        "code_hash": code_hash(),
        "episodes": summary.episodes,
        "steps": summary.steps,
        "n_workers": summary.n_workers,
        "policy_version": summary.policy_version,
        "updates": summary.updates,
        "decision_latency_mean_s": summary.mean_latency,
        "decision_latency_max_s": summary.max_latency,
        "decision_latency_ratio": summary.latency_ratio,
        "files": files,
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    logger.info("wrote %s (%d episodes)", run_dir, summary.episodes)
    return run_dir


def find_runs(out_dir):
    out_dir = Path(out_dir)
    if not out_dir.is_dir():
        raise ConfigError(f"output directory {out_dir} does not exist")
    if (out_dir / "manifest.json").exists():
        return [out_dir]
    return sorted(p for p in out_dir.iterdir() if p.is_dir() and p.name != "report")


def missing_files(run_dir):
    return [name for name in REQUIRED_FILES if not (Path(run_dir) / name).exists()]


def load_manifest(run_dir):
    manifest = json.loads((Path(run_dir) / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(
            f"{run_dir}: schema version {manifest.get('schema_version')} != {SCHEMA_VERSION}"
        )
    return manifest
