"""Dual-loop curriculum and reward shaping for multi-agent traffic-signal control."""

__version__ = "0.1.0"
