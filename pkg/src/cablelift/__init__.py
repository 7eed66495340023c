"""Cooperative slung-load manipulation with a team of quadrotors: simulator,
low-level control, multi-agent PPO training and evaluation."""

__version__ = "0.1.0"
