"""Simulated tendon-driven arm with a learned self-body image and its controllers."""

__version__ = "0.1.0"
