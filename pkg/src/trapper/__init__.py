"""Trapping a rolling ball with a planar arm: physics, planners, small networks, harness."""

__version__ = "0.1.0"
