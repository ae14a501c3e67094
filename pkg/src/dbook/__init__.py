"""Multi-policy PPO with co-evolution for outpatient double-booking."""

__version__ = "0.1.0"
