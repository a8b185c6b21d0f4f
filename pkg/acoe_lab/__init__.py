"""Robust reinforcement learning against observation adversaries, at desk scale."""

from . import settings  # noqa: F401

__version__ = "0.1.0"
