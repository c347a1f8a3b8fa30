"""Desk-scale instruction-following navigation with imitation and group-relative RL."""

__version__ = "0.1.0"
