"""Desk-scale LiDAR scene-flow estimation kit.

Pipeline: voxelization with offset preservation -> Z-order serialization ->
sparse spatio-temporal backbone -> offset-conditioned selective-scan decoder
-> per-point flow, plus the scene-adaptive loss and the full EPE metric
suite, all verified against brute-force oracles.
"""

__version__ = "0.1.0"
