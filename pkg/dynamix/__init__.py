"""DYNAMIX: reinforcement-learning batch-size arbitration for BSP data-parallel training (simulated cluster)."""

__version__ = "0.1.0"
