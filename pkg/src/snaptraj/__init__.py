"""snaptraj: trajectory recovery from camera-network snapshots.

A desk-scale pipeline: synthetic worlds with controlled re-identification
noise, two-threshold multi-modal clustering, a GCN-scored soft-denoising
sequence generator, classical recovery baselines, and evaluation plus
downstream applications (link speeds, clustering feedback).
"""

__version__ = "0.1.0"
