"""Pose/identity feature disentangling with a pose-discrepancy spatial transformer."""

__version__ = "0.1.0"
