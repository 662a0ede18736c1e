"""Streaming test-time adaptation for a small segmentation network.

The package generates synthetic drifting video sequences, trains a
source segmentation model on the undrifted scenes, then adapts the
model frame by frame while the domain shifts, using entropy
minimization restricted to backbone normalization parameters, dynamic
interpolation of normalization statistics, confidence-based pixel
filtering, and an entropy-jump gate that decides when to adapt at all.
"""

__version__ = "0.1.0"
