"""Unsupervised anomaly segmentation benchmark on brain-like volumes."""
