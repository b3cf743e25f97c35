"""Real-time curtailment OPF for distribution feeders with wind stations."""

__version__ = "0.1.0"
