"""Policy-gradient training with discrete internal states for small POMDPs."""

__version__ = "0.1.0"
