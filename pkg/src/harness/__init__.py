"""Harness — orchestration, persistence and evaluation studies.

Sub-package containing:
    store     – JSON / JSON Lines / CSV / npz artefacts and run state
    pipeline  – the staged, resumable search for one root seed
    oracle    – exhaustive full training of a desk-scale space
    compare   – K × η grid, probe sensitivity, early-stopping bias, ranking fidelity
"""
