"""Desk-scale digital-twin arm synchronization: kinematics, slotted
cross-system simulator, and a constrained PPO trainer for joint packet
scheduling and prediction horizons."""

__version__ = "0.1.0"
