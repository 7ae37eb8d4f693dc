"""Discrete-event model of a partitioned CPU + SIMD + GPU space SoC."""

__version__ = "0.1.0"
