"""ML Engine — datasets, training and evaluation.

Sub-package containing:
    dataset    – synthetic data, reduced datasets, probe sets, raw loader hook
    trainer    – full training, early-stopped training with trajectory capture
    evaluator  – accuracy, ranking fidelity and MSE fidelity scoring
"""
