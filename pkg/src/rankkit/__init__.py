"""Desk-scale toolkit for multi-task CTR ranking models.

Numpy implementations of low-rank and attention cross networks, an in-model
isotonic calibration layer, gated towers, hashed/quantized embedding tables,
Fisher-regularized incremental training and neural-linear Thompson sampling.
"""

__version__ = "0.1.0"
