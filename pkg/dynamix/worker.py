"""
DYNAMIX — Worker Runtime
=========================

Worker side of the decision loop:

    HELLO → (ACK) → READY
    repeat per episode:
        report step 0
        on ACTION(t):      x_i ← clamp(x_i + a_t), run k iterations, report t+1
        on EPISODE_END:    reset environment and batch size (or wait for TERMINATE)
    on TERMINATE: exit

Metrics come from a MetricSource. In simulation mode every worker shares one
ClusterSimulator through SimulatedMetricSource, which realizes the BSP
barrier: an iteration only advances once every worker has submitted its
batch size for it.
"""

import logging
import threading
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .config import BATCH_MAX, BATCH_MIN, DEFAULT_K, DEFAULT_TIMEOUT, INITIAL_BATCH
from .errors import BarrierTimeout, ConfigError, ContractViolation, ProtocolError
from .metrics import AggregateWindow, aggregate_window
from .policy import ActionDelta
from .protocol import PROTOCOL_VERSION, MessageKind, ProtocolMessage
from .simenv import ClusterSimulator

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BatchSizeLimits:
    x_min: int = BATCH_MIN
    x_max: int = BATCH_MAX
    initial: int = INITIAL_BATCH

    def __post_init__(self):
        if not 1 <= self.x_min <= self.initial <= self.x_max:
            raise ConfigError(
                f"batch limits need 1 <= x_min <= initial <= x_max, "
                f"got {self.x_min}, {self.initial}, {self.x_max}"
            )


def apply_action(batch_size, action, limits):
    """x ← max(min(x + a, x_max), x_min)."""
    delta = getattr(action, "value", action)
    return max(min(int(batch_size) + int(delta), limits.x_max), limits.x_min)


# ══════════════════════════════════════════════
# 1. Metric sources
# ══════════════════════════════════════════════

class MetricSource(Protocol):
    def iterate(self, worker_id: int, batch_size: int): ...

    def reset(self, worker_id: int) -> None: ...


class SimulatedMetricSource:
    """
    Shared simulator behind a generation barrier.

    iterate() blocks until every registered worker has submitted a batch
    size for the current iteration; the last arrival steps the simulator.
    reset() is collective in the same way, so no worker can start a new
    episode on a stale simulator.
    """

    def __init__(self, simulator, timeout=DEFAULT_TIMEOUT):
        self.simulator = simulator
        self.timeout = timeout
        self._ids = set(simulator.config.worker_ids)
        self._cond = threading.Condition()
        self._pending = {}
        self._outcomes = {}
        self._generation = 0
        self._resetting = set()
        self._reset_generation = 0
        self.error = None

    def _wait(self, predicate, what, worker_id):
        if not self._cond.wait_for(lambda: predicate() or self.error is not None, timeout=self.timeout):
            missing = sorted(self._ids - set(self._pending) - self._resetting)
            self.error = BarrierTimeout(
                f"worker {worker_id}: {what} barrier not reached within {self.timeout} s "
                f"(waiting on worker(s) {missing})"
            )
            self._cond.notify_all()
        if self.error is not None:
            raise self.error

    def iterate(self, worker_id, batch_size):
        with self._cond:
            if worker_id not in self._ids:
                raise ConfigError(f"unknown worker id {worker_id}")
            if worker_id in self._pending:
                raise ContractViolation(f"worker {worker_id} submitted twice for one iteration")
            self._pending[worker_id] = int(batch_size)
            generation = self._generation
            if set(self._pending) == self._ids:
                outcomes = self.simulator.step(dict(self._pending))
                self._outcomes = {o.worker_id: o for o in outcomes}
                self._pending = {}
                self._generation += 1
                self._cond.notify_all()
            else:
                self._wait(lambda: self._generation != generation, "iteration", worker_id)
            return self._outcomes[worker_id]

    def reset(self, worker_id):
        with self._cond:
            self._resetting.add(worker_id)
            generation = self._reset_generation
            if self._resetting == self._ids:
                self.simulator.reset()
                self._resetting = set()
                self._reset_generation += 1
                self._cond.notify_all()
            else:
                self._wait(lambda: self._reset_generation != generation, "reset", worker_id)

    def abort(self, error):
        with self._cond:
            self.error = error
            self._cond.notify_all()


# ══════════════════════════════════════════════
# 2. Runtime
# ══════════════════════════════════════════════

@dataclass
class WorkerRuntime:
    worker_id: int
    source: MetricSource
    limits: BatchSizeLimits = field(default_factory=BatchSizeLimits)
    k: int = DEFAULT_K
    gain_window: int = None
    timeout: float = DEFAULT_TIMEOUT
    session_id: str = ""
    batch_size: int = None
    step: int = 0
    episode: int = 0
    samples: int = 0
    cores: float = None      # sent with every report when set

    def __post_init__(self):
        if self.k < 2:
            raise ConfigError(f"k must be >= 2, got {self.k}")
        if self.batch_size is None:
            self.batch_size = self.limits.initial

    def reset_episode(self):
        self.source.reset(self.worker_id)
        self.batch_size = self.limits.initial
        self.step = 0
        self.samples = 0

    def message(self, kind, payload=None):
        return ProtocolMessage(kind, self.session_id, self.worker_id, self.step, self.episode, payload or {})


def run_cycle(runtime, k=None):
    """k iterations at the current batch size, folded into a STATE_REPORT payload."""
    k = runtime.k if k is None else k
    outcomes = [runtime.source.iterate(runtime.worker_id, runtime.batch_size) for _ in range(k)]
    runtime.samples += sum(o.batch_size for o in outcomes)
    local = aggregate_window(AggregateWindow(runtime.worker_id, k, tuple(outcomes)), runtime.gain_window)
    payload = {
        "local_state": local.to_dict(),
        "batch_size": runtime.batch_size,
        "window": {
            "sim_time": outcomes[-1].sim_time,
            "mean_compute_time": float(np.mean([o.compute_time for o in outcomes])),
            "mean_sync_time": float(np.mean([o.sync_time for o in outcomes])),
            "samples": runtime.samples,
            "curve_accuracy": outcomes[-1].curve_accuracy,
        },
    }
    if runtime.cores is not None:
        payload["cores"] = float(runtime.cores)
    return payload


def _recv(runtime, conn, *expected):
    message = conn.recv(timeout=runtime.timeout)
    if message.version != PROTOCOL_VERSION:
        raise ProtocolError(f"worker {runtime.worker_id}: protocol version {message.version} != {PROTOCOL_VERSION}")
    if message.kind not in expected:
        raise ProtocolError(
            f"worker {runtime.worker_id}: expected {'/'.join(k.value for k in expected)} "
            f"at step {runtime.step}, got {message.kind.value}"
        )
    return message


def serve(runtime, conn):
    """Run the worker side of one session until TERMINATE."""
    conn.send(runtime.message(MessageKind.HELLO, {"batch_size": runtime.batch_size}))
    ack = _recv(runtime, conn, MessageKind.ACK, MessageKind.TERMINATE)
    if ack.kind is MessageKind.TERMINATE or not ack.payload.get("accepted", False):
        logger.warning("worker %d rejected at HELLO: %s", runtime.worker_id, ack.payload.get("reason", ""))
        return
    runtime.session_id = ack.session_id
    conn.send(runtime.message(MessageKind.READY))

    runtime.reset_episode()
    conn.send(runtime.message(MessageKind.STATE_REPORT, run_cycle(runtime)))
    while True:
        message = _recv(runtime, conn, MessageKind.ACTION, MessageKind.EPISODE_END, MessageKind.TERMINATE)
        if message.kind is MessageKind.TERMINATE:
            logger.debug("worker %d terminated at episode=%d step=%d", runtime.worker_id, runtime.episode, runtime.step)
            return
        if message.kind is MessageKind.EPISODE_END:
            if message.payload.get("last", False):
                _recv(runtime, conn, MessageKind.TERMINATE)
                return
            runtime.episode = message.episode + 1
            runtime.reset_episode()
            conn.send(runtime.message(MessageKind.STATE_REPORT, run_cycle(runtime)))
            continue
        if message.step != runtime.step or message.episode != runtime.episode:
            raise ProtocolError(
                f"worker {runtime.worker_id}: ACTION for episode={message.episode} step={message.step}, "
                f"expected episode={runtime.episode} step={runtime.step}"
            )
        action = ActionDelta.from_index(int(message.payload["action_index"]))
        runtime.batch_size = apply_action(runtime.batch_size, action, runtime.limits)
        runtime.step += 1
        conn.send(runtime.message(MessageKind.STATE_REPORT, run_cycle(runtime)))


# ══════════════════════════════════════════════
# 3. In-process launch
# ══════════════════════════════════════════════

class WorkerThread(threading.Thread):
    """serve() on a daemon thread; the exception (if any) is kept on `.error`."""

    def __init__(self, runtime, connect):
        super().__init__(name=f"dynamix-worker-{runtime.worker_id}", daemon=True)
        self.runtime = runtime
        self._connect = connect
        self.error = None

    def run(self):
        conn = None
        try:
            conn = self._connect()
            serve(self.runtime, conn)
        except Exception as e:
            self.error = e
            logger.warning("worker %d stopped: %s", self.runtime.worker_id, e)
            abort = getattr(self.runtime.source, "abort", None)
            if abort is not None and not isinstance(e, BarrierTimeout):
                abort(e)
        finally:
            if conn is not None:
                conn.close()


def launch_simulated_workers(cluster, listener, limits=None, k=DEFAULT_K, timeout=DEFAULT_TIMEOUT,
                             gain_window=None):
    """One WorkerThread per cluster worker, all sharing one simulated BSP barrier."""
    source = SimulatedMetricSource(ClusterSimulator(cluster), timeout=timeout)
    limits = limits or BatchSizeLimits()
    threads = []
    for wid in cluster.worker_ids:
        runtime = WorkerRuntime(wid, source, limits=limits, k=k, gain_window=gain_window, timeout=timeout,
                                cores=cluster.profile(wid).cores)
        thread = WorkerThread(runtime, lambda: listener.connect(timeout))
        thread.start()
        threads.append(thread)
    return source, threads
