"""Cluster Engine — trajectory features, k-means and champion selection.

Sub-package containing:
    features   – per-layer cosine-drift features of an early-training run
    kmeans     – k-means++ / Lloyd clustering of the flattened features
    selection  – per-cluster champions, merge by full training, random-search baseline
"""
