"""Topology-aware segmentation of corneal M-mode OCT with a real-time overlay pipeline."""

__version__ = "0.1.0"
