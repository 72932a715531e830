"""
DYNAMIX — Run-wide Defaults, Presets and Logging Setup
=======================================================

Environment variables:
    DYNAMIX_LOG          — log level for the `dynamix` logger (default: INFO)
    DYNAMIX_RESULTS_DIR  — output directory for analysis scripts (default: ./results)
"""

import logging
import os
from dataclasses import dataclass

LOG_ENV = "DYNAMIX_LOG"
RESULTS_ENV = "DYNAMIX_RESULTS_DIR"

RESULTS_DIR = os.environ.get(RESULTS_ENV, "./results")

# Batch-size range and starting point (x_min, x_max, x̄)
BATCH_MIN = 32
BATCH_MAX = 1024
INITIAL_BATCH = 256

# Decision cycle and protocol timing
DEFAULT_K = 8
DEFAULT_TIMEOUT = 30.0
DEFAULT_EPISODES = 20
DEFAULT_THRESHOLD = 0.80
SMOOTHING_WINDOW = 5

LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"


@dataclass(frozen=True)
class SchedulePreset:
    name: str
    episodes: int
    steps: int
    regime: str


# Named after the three training schedules of the evaluation
# (SGD workloads, adaptive-optimizer workloads, deeper models).
PRESETS = {
    "sgd-100": SchedulePreset("sgd-100", DEFAULT_EPISODES, 100, "sgd"),
    "adaptive-70": SchedulePreset("adaptive-70", DEFAULT_EPISODES, 70, "adaptive"),
    "large-120": SchedulePreset("large-120", DEFAULT_EPISODES, 120, "sgd"),
}
DEFAULT_PRESET = "sgd-100"


def setup_logging(level=None):
    """Configure the `dynamix` logger once; level from DYNAMIX_LOG unless given."""
    name = (level or os.environ.get(LOG_ENV, "INFO")).upper()
    resolved = logging.getLevelName(name)
    root = logging.getLogger("dynamix")
    if not root.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)
    if not isinstance(resolved, int):
        root.setLevel(logging.INFO)
        root.warning("unknown log level %r in %s, using INFO", name, LOG_ENV)
    else:
        root.setLevel(resolved)
    return root
