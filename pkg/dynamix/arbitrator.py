"""
DYNAMIX — RL Arbitrator
========================

Coordinator side of the decision loop. One session runs E episodes of S
decision steps over N registered workers:

    accept N × HELLO, reply ACK, wait for N × READY            (readiness barrier)
    per episode:
        for t = 0 .. S:
            gather N × STATE_REPORT(t)                          (decision barrier)
            reward of window t → credited to the decision of step t−1
            t < S:  sample a_i ~ π_θ(s_i, s_global), send N × ACTION(t)
        train mode: θ ← update_policy(θ, trajectory)
        send N × EPISODE_END (workers reset their environment)
    send N × TERMINATE

Connections are drained by one reader thread each into a single inbox;
decisions and updates run serially on the session thread, and θ has a single
writer. Every message in or out is kept in `message_log`, from which the
trajectories can be rebuilt (`replay_trajectories`).
"""

import logging
import queue
import threading
import time
import uuid
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .config import DEFAULT_EPISODES, DEFAULT_K, DEFAULT_THRESHOLD, DEFAULT_TIMEOUT, SMOOTHING_WINDOW
from .errors import (
    BarrierTimeout,
    ConfigError,
    ContractViolation,
    DynamixError,
    PolicyUpdateError,
    ProtocolError,
    SessionAborted,
    WorkerTimeout,
)
from .metrics import GlobalState, GlobalStateTracker, LocalState, StateNormalizers, build_state_vector, time_to_threshold
from .policy import (
    ActionDelta,
    PPOConfig,
    Trajectory,
    TrajectoryRecord,
    init_params,
    select_action,
    update_policy,
)
from .protocol import PROTOCOL_VERSION, InProcessHub, MessageKind, ProtocolMessage, SocketListener
from .reward import Regime, RewardCoefficients, compute_reward, discounted_return
from .worker import BatchSizeLimits, apply_action, launch_simulated_workers

logger = logging.getLogger(__name__)

MODES = ("train", "infer", "baseline")


@dataclass(frozen=True)
class SessionConfig:
    episodes: int = DEFAULT_EPISODES
    steps: int = 100
    k: int = DEFAULT_K
    timeout: float = DEFAULT_TIMEOUT
    limits: BatchSizeLimits = field(default_factory=BatchSizeLimits)
    regime: Regime = Regime.SGD
    coeffs: RewardCoefficients = field(default_factory=RewardCoefficients)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    normalizers: StateNormalizers = field(default_factory=StateNormalizers)
    mode: str = "train"
    greedy: bool = False
    seed: int = 0
    threshold: float = DEFAULT_THRESHOLD
    gain_window: int = None
    t_iter_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime(self.regime))
        if self.mode not in MODES:
            raise ConfigError(f"unknown session mode {self.mode!r}, expected one of {MODES}")
        if self.episodes < 1 or self.steps < 1:
            raise ConfigError(f"episodes and steps must be >= 1, got {self.episodes}, {self.steps}")
        if self.k < 2:
            raise ConfigError(f"k must be >= 2, got {self.k}")
        if not self.timeout > 0:
            raise ConfigError(f"timeout must be > 0, got {self.timeout}")


@dataclass
class EpisodeRecord:
    episode: int
    worker_rewards: dict
    mean_reward: float
    median_reward: float
    std_reward: float
    sim_wall_time: float
    final_accuracy: float
    time_to_threshold: float
    quartile_batch_mean: list
    quartile_batch_std: list
    policy_version: int

    def to_row(self):
        row = {
            "episode": self.episode,
            "mean_reward": self.mean_reward,
            "median_reward": self.median_reward,
            "std_reward": self.std_reward,
            "sim_wall_time": self.sim_wall_time,
            "final_accuracy": self.final_accuracy,
            "time_to_threshold": self.time_to_threshold,
        }
        for q, (m, s) in enumerate(zip(self.quartile_batch_mean, self.quartile_batch_std), start=1):
            row[f"q{q}_batch_mean"] = m
            row[f"q{q}_batch_std"] = s
        row["policy_version"] = self.policy_version
        return row


@dataclass
class SessionSummary:
    session_id: str
    mode: str
    episodes: int
    steps: int
    n_workers: int
    policy_version: int
    updates: int
    records: int
    episode_records: list
    step_rows: list
    mean_latency: float
    max_latency: float
    latency_ratio: float

    def episodes_frame(self):
        return pd.DataFrame([r.to_row() for r in self.episode_records])

    def worker_rewards_frame(self):
        rows = [
            {"episode": r.episode, "worker_id": wid, "cumulative_reward": v}
            for r in self.episode_records
            for wid, v in sorted(r.worker_rewards.items())
        ]
        return pd.DataFrame(rows, columns=["episode", "worker_id", "cumulative_reward"])


@dataclass(frozen=True)
class LogEntry:
    direction: str      # "in" | "out"
    message: ProtocolMessage
    timestamp: float


def quartile_batch_summary(batch_means, steps):
    """Mean and std of the per-step mean batch size over four quartiles of steps 0..S."""
    frame = pd.DataFrame({"step": np.arange(len(batch_means)), "batch": batch_means})
    frame["quartile"] = frame["step"] * 4 // (steps + 1)
    grouped = frame.groupby("quartile")["batch"].agg(["mean", "std"]).reindex(range(4))
    return grouped["mean"].tolist(), grouped["std"].fillna(0.0).tolist()


class Arbitrator:
    def __init__(self, config, listener, worker_ids, params=None):
        self.config = config
        self.listener = listener
        self.worker_ids = sorted(worker_ids)
        if not self.worker_ids:
            raise ConfigError("arbitrator needs at least one worker")
        self.session_id = uuid.uuid4().hex
        if params is None and config.mode != "baseline":
            params = init_params(np.random.default_rng(config.seed), hidden=config.ppo.hidden)
        self.params = params
        self.policy_rng = np.random.default_rng([config.seed, 1])
        self.tracker = GlobalStateTracker(config.steps)
        self.connections = {}
        self.inbox = queue.Queue()
        self.message_log = []
        self.trajectories = []
        self.trajectory = Trajectory()
        self.episode = 0
        self.updates = 0
        self.latencies = []
        self.cycle_times = []
        self.step_rows = []
        self.episode_records = []
        self._closing = False

    # ── transport ──

    def _send(self, worker_id, kind, step, payload=None):
        message = ProtocolMessage(kind, self.session_id, worker_id, step, self.episode, payload or {})
        self.message_log.append(LogEntry("out", message, time.time()))
        self.connections[worker_id].send(message)

    def _broadcast(self, kind, step, payload=None):
        for wid in self.worker_ids:
            self._send(wid, kind, step, payload)

    def _reader(self, worker_id, conn):
        while True:
            try:
                message = conn.recv(timeout=None)
            except Exception as e:
                if not self._closing:
                    self.inbox.put((worker_id, e))
                return
            self.inbox.put((worker_id, message))

    def _register(self):
        timeout = self.config.timeout
        for _ in self.worker_ids:
            try:
                conn = self.listener.accept(timeout=timeout)
                hello = conn.recv(timeout=timeout)
            except TimeoutError as e:
                missing = sorted(set(self.worker_ids) - set(self.connections))
                raise WorkerTimeout(missing[0], 0, "HELLO", timeout) from e
            self.message_log.append(LogEntry("in", hello, time.time()))
            wid = hello.worker_id
            reason = None
            if hello.kind is not MessageKind.HELLO:
                reason = f"expected HELLO, got {hello.kind.value}"
            elif hello.version != PROTOCOL_VERSION:
                reason = f"protocol version {hello.version} != {PROTOCOL_VERSION}"
            elif wid not in self.worker_ids:
                reason = f"unknown worker id {wid}"
            elif wid in self.connections:
                reason = f"worker {wid} already registered"
            if reason is not None:
                reply = ProtocolMessage(MessageKind.ACK, self.session_id, wid, 0, 0,
                                        {"accepted": False, "reason": reason})
                self.message_log.append(LogEntry("out", reply, time.time()))
                conn.send(reply)
                conn.close()
                raise ProtocolError(f"connection rejected at HELLO: {reason}")
            self.connections[wid] = conn
            self._send(wid, MessageKind.ACK, 0, {"accepted": True, "protocol_version": PROTOCOL_VERSION})
            threading.Thread(target=self._reader, args=(wid, conn), daemon=True,
                             name=f"dynamix-reader-{wid}").start()
        self._gather(MessageKind.READY, 0)
        logger.info("session %s: %d workers ready", self.session_id[:8], len(self.worker_ids))

    def _gather(self, kind, step):
        """One `kind` message per worker for `step`, within the per-message timeout."""
        timeout = self.config.timeout
        deadline = time.monotonic() + timeout
        received = {}
        while len(received) < len(self.worker_ids):
            remaining = deadline - time.monotonic()
            try:
                if remaining <= 0:
                    raise queue.Empty
                wid, item = self.inbox.get(timeout=remaining)
            except queue.Empty:
                stalled = min(set(self.worker_ids) - set(received))
                raise WorkerTimeout(stalled, step, kind.value, timeout) from None
            if isinstance(item, BaseException):
                raise ProtocolError(
                    f"worker {wid} failed at episode={self.episode} step={step}: {item}"
                ) from item
            self.message_log.append(LogEntry("in", item, time.time()))
            if item.version != PROTOCOL_VERSION:
                raise ProtocolError(f"worker {wid}: protocol version {item.version} != {PROTOCOL_VERSION}")
            if item.kind is not kind or item.step != step or item.episode != self.episode:
                raise ProtocolError(
                    f"worker {wid}: expected {kind.value} episode={self.episode} step={step}, "
                    f"got {item.kind.value} episode={item.episode} step={item.step}"
                )
            if wid in received:
                raise ProtocolError(f"worker {wid}: duplicate {kind.value} for step {step}")
            received[wid] = item
        return received

    # ── decisions ──

    def decide_actions(self, step_reports, global_state):
        """worker_id → (ActionDelta, log_prob, state vector) for one decision step."""
        if sorted(step_reports) != self.worker_ids:
            raise ContractViolation(
                f"decision needs one report per worker {self.worker_ids}, got {sorted(step_reports)}"
            )
        decisions = {}
        for wid in self.worker_ids:
            local = LocalState.from_dict(step_reports[wid].payload["local_state"])
            state = build_state_vector(local, global_state, self.config.normalizers,
                                       step_reports[wid].payload.get("cores"))
            if self.params is None:
                decisions[wid] = (ActionDelta.NOOP, 0.0, state)
            else:
                action, logp = select_action(self.params, state, self.policy_rng, greedy=self.config.greedy)
                decisions[wid] = (action, logp, state)
        return decisions

    def episode_reset(self):
        """Arbitrator-side reset; workers reset their environment on EPISODE_END."""
        self.tracker.reset()
        self.trajectory = Trajectory()

    def _reward(self, report, step):
        local = LocalState.from_dict(report.payload["local_state"])
        return compute_reward(local, int(report.payload["batch_size"]), self.config.coeffs,
                              self.config.regime, step, report.worker_id, self.config.t_iter_scale)

    def _run_episode(self):
        cfg = self.config
        S = cfg.steps
        self.episode_reset()
        rewards = {wid: [] for wid in self.worker_ids}
        times, accuracies, batch_means = [], [], []
        final_accuracy, sim_time = float("nan"), 0.0

        for step in range(S + 1):
            reports = self._gather(MessageKind.STATE_REPORT, step)
            started = time.perf_counter()
            local_acc = [reports[w].payload["local_state"]["A_bar"] for w in self.worker_ids]
            global_state = self.tracker.update(step, float(np.mean(local_acc)))

            step_rewards = {}
            if step >= 1:
                for wid in self.worker_ids:
                    sample = self._reward(reports[wid], step)
                    step_rewards[wid] = sample.value
                    rewards[wid].append(sample.value)
                    if self.params is not None:
                        self.trajectory.credit(wid, step - 1, sample.value)

            windows = {w: reports[w].payload["window"] for w in self.worker_ids}
            decisions = {}
            if step < S:
                decisions = self.decide_actions(reports, global_state)
                for wid in self.worker_ids:
                    action, logp, state = decisions[wid]
                    if self.params is not None:
                        self.trajectory.add(TrajectoryRecord(state, action.index, logp, wid, step))
                    self._send(wid, MessageKind.ACTION, step, {
                        "action_index": action.index,
                        "delta": action.value,
                        "log_prob": logp,
                        "batch_size": apply_action(int(reports[wid].payload["batch_size"]), action, cfg.limits),
                        "global_state": global_state.to_dict(),
                    })
                self.latencies.append(time.perf_counter() - started)
                self.cycle_times.append(cfg.k * float(np.mean(
                    [w["mean_compute_time"] + w["mean_sync_time"] for w in windows.values()]
                )))

            sim_time = windows[self.worker_ids[0]]["sim_time"]
            times.append(sim_time)
            accuracies.append(float(np.mean(local_acc)))
            batch_means.append(float(np.mean([reports[w].payload["batch_size"] for w in self.worker_ids])))
            final_accuracy = float(np.mean([windows[w]["curve_accuracy"] for w in self.worker_ids]))
            for wid in self.worker_ids:
                self.step_rows.append({
                    "episode": self.episode,
                    "step": step,
                    "worker_id": wid,
                    "batch_size": reports[wid].payload["batch_size"],
                    "delta": decisions[wid][0].value if decisions else None,
                    "reward": step_rewards.get(wid),
                    "A_bar": reports[wid].payload["local_state"]["A_bar"],
                    "T_iter": reports[wid].payload["local_state"]["T_iter"],
                    "curve_accuracy": windows[wid]["curve_accuracy"],
                    "sim_time": sim_time,
                })

        if cfg.mode == "train":
            try:
                self.params = update_policy(self.params, self.trajectory, cfg.coeffs, cfg.ppo)
            except (ContractViolation, PolicyUpdateError) as e:
                raise PolicyUpdateError(f"episode {self.episode}: {e}") from e
            self.updates += 1
        if self.params is not None:
            self.trajectories.append(self.trajectory)

        version = self.params.version if self.params is not None else 0
        last = self.episode == cfg.episodes - 1
        self._broadcast(MessageKind.EPISODE_END, S, {"policy_version": version, "last": last})

        cumulative = {wid: discounted_return(rewards[wid], cfg.coeffs.gamma) for wid in self.worker_ids}
        values = np.array(list(cumulative.values()))
        q_mean, q_std = quartile_batch_summary(batch_means, S)
        record = EpisodeRecord(
            episode=self.episode,
            worker_rewards=cumulative,
            mean_reward=float(values.mean()),
            median_reward=float(np.median(values)),
            std_reward=float(values.std()),
            sim_wall_time=sim_time,
            final_accuracy=final_accuracy,
            time_to_threshold=time_to_threshold(times, accuracies, cfg.threshold, SMOOTHING_WINDOW),
            quartile_batch_mean=q_mean,
            quartile_batch_std=q_std,
            policy_version=version,
        )
        self.episode_records.append(record)
        logger.info(
            "episode=%d mean_reward=%.3f median=%.3f accuracy=%.4f sim_time=%.1fs policy_v=%d",
            self.episode, record.mean_reward, record.median_reward, final_accuracy, sim_time, version,
        )
        return record

    # ── session ──

    def run_session(self):
        cfg = self.config
        try:
            self._register()
            for episode in range(cfg.episodes):
                self.episode = episode
                self._run_episode()
            self._broadcast(MessageKind.TERMINATE, cfg.steps)
        except (DynamixError, OSError) as e:
            logger.error("session %s aborted: %s", self.session_id[:8], e)
            self._terminate_quietly()
            raise SessionAborted(f"session aborted at episode={self.episode}: {e}") from e
        finally:
            self._closing = True
            for conn in self.connections.values():
                conn.close()
        return self.summary()

    def _terminate_quietly(self):
        for wid, conn in self.connections.items():
            try:
                conn.send(ProtocolMessage(MessageKind.TERMINATE, self.session_id, wid, 0, self.episode,
                                          {"reason": "abort"}))
            except (DynamixError, OSError):
                pass

    def summary(self):
        latency = np.array(self.latencies) if self.latencies else np.zeros(1)
        cycle = float(np.mean(self.cycle_times)) if self.cycle_times else float("nan")
        return SessionSummary(
            session_id=self.session_id,
            mode=self.config.mode,
            episodes=len(self.episode_records),
            steps=self.config.steps,
            n_workers=len(self.worker_ids),
            policy_version=self.params.version if self.params is not None else 0,
            updates=self.updates,
            records=sum(len(t) for t in self.trajectories),
            episode_records=self.episode_records,
            step_rows=self.step_rows,
            mean_latency=float(latency.mean()),
            max_latency=float(latency.max()),
            latency_ratio=float(latency.mean() / cycle) if cycle > 0 else float("nan"),
        )


# ══════════════════════════════════════════════
# Log checks and replay
# ══════════════════════════════════════════════

def check_decision_barrier(message_log):
    """True when every ACTION of (episode, step) follows the last STATE_REPORT of that step."""
    last_report, first_action = {}, {}
    for i, entry in enumerate(message_log):
        m = entry.message
        key = (m.episode, m.step)
        if entry.direction == "in" and m.kind is MessageKind.STATE_REPORT:
            last_report[key] = i
        elif entry.direction == "out" and m.kind is MessageKind.ACTION:
            first_action.setdefault(key, i)
    return all(key in last_report and last_report[key] < i for key, i in first_action.items())


def replay_trajectories(message_log, config):
    """Rebuild each episode's Trajectory from the message log alone."""
    reports = {}
    actions = []
    for entry in message_log:
        m = entry.message
        if entry.direction == "in" and m.kind is MessageKind.STATE_REPORT:
            reports[(m.episode, m.step, m.worker_id)] = m
        elif entry.direction == "out" and m.kind is MessageKind.ACTION:
            actions.append(m)
    episodes = {}
    for m in actions:
        traj = episodes.setdefault(m.episode, Trajectory())
        report = reports[(m.episode, m.step, m.worker_id)]
        local = LocalState.from_dict(report.payload["local_state"])
        global_state = GlobalState.from_dict(m.payload["global_state"])
        state = build_state_vector(local, global_state, config.normalizers, report.payload.get("cores"))
        record = TrajectoryRecord(state, int(m.payload["action_index"]), float(m.payload["log_prob"]),
                                  m.worker_id, m.step)
        nxt = reports.get((m.episode, m.step + 1, m.worker_id))
        if nxt is not None:
            local_next = LocalState.from_dict(nxt.payload["local_state"])
            record.reward = compute_reward(local_next, int(nxt.payload["batch_size"]), config.coeffs,
                                           config.regime, m.step + 1, m.worker_id,
                                           config.t_iter_scale).value
        traj.add(record)
    return [episodes[e] for e in sorted(episodes)]


# ══════════════════════════════════════════════
# Local sessions (simulated workers)
# ══════════════════════════════════════════════

def run_local_session(config, cluster, params=None, transport="inproc", listen="127.0.0.1:0"):
    """
    Arbitrator plus one simulated worker thread per cluster worker.

    Returns (summary, arbitrator). Raises SessionAborted when the session fails.
    """
    if transport == "inproc":
        listener = InProcessHub()
    elif transport == "socket":
        listener = SocketListener(listen)
    else:
        raise ConfigError(f"unknown transport {transport!r}")
    arbitrator = Arbitrator(config, listener, cluster.worker_ids, params=params)
    source, threads = launch_simulated_workers(
        cluster, listener, limits=config.limits, k=config.k, timeout=config.timeout,
        gain_window=config.gain_window,
    )
    try:
        summary = arbitrator.run_session()
    except SessionAborted as e:
        source.abort(BarrierTimeout(str(e)))
        raise
    finally:
        for t in threads:
            t.join(timeout=config.timeout)
        listener.close()
    for t in threads:
        if t.error is not None:
            logger.warning("worker %d ended with error: %s", t.runtime.worker_id, t.error)
    return summary, arbitrator
