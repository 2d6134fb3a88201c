"""Offline safe imitation learning with a learned cost, a cost critic and an adaptive penalty."""

__version__ = "0.1.0"
