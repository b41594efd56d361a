"""NN Engine — minimal deterministic numpy network engine.

Sub-package containing:
    layers   – layer specs and per-kind forward/backward kernels
    network  – network construction, forward, gradients, SGD, snapshots
"""
