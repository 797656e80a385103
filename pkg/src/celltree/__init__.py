"""celltree: hierarchical clustering of single-cell count data.

A tree-structured variational autoencoder over negative-binomial gene counts
with learned per-batch expression offsets, grown one leaf at a time, plus the
surrounding toolkit: count-matrix ingestion and preprocessing, a synthetic
data generator with known hierarchy, clustering metrics, a PCA + Ward
baseline, and a command-line interface.
"""

__version__ = "0.1.0"
