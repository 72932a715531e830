"""Exception hierarchy shared by every DYNAMIX module."""


class DynamixError(Exception):
    """Base class for all DYNAMIX failures."""


class ConfigError(DynamixError):
    """Invalid or missing configuration."""


class ContractViolation(DynamixError, ValueError):
    """An operation was called outside its precondition."""


class ProtocolError(DynamixError):
    """Malformed frame, unknown message kind or protocol-version mismatch."""


class WorkerTimeout(ProtocolError):
    """An expected message did not arrive from a worker in time."""

    def __init__(self, worker_id, step, kind, timeout):
        self.worker_id = worker_id
        self.step = step
        self.kind = kind
        self.timeout = timeout
        super().__init__(
            f"worker {worker_id} stalled: no {kind} for step {step} "
            f"within {timeout:.3g} s"
        )


class BarrierTimeout(DynamixError):
    """The simulated BSP barrier was not reached by every worker in time."""


class PolicyUpdateError(DynamixError):
    """A policy update produced non-finite gradients or parameters."""


class CheckpointError(DynamixError):
    """A policy checkpoint could not be read or does not match."""


class SessionAborted(DynamixError):
    """The arbitrator session stopped before completing its schedule."""
