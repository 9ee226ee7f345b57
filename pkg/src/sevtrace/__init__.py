"""Simulation of page-tracking secret extraction from encrypted VMs, plus memory-dump scanners."""

__version__ = "0.1.0"
