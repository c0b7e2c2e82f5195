"""Tensor-network anomaly detection for trigger-level inference.

Spaced matrix product operators (SMPO) and their cascades (CSMPO) map an
embedded 19-particle event to a squared norm; events far from the typical
background norm are flagged.  The package covers embedding, models,
contraction plans with exact MAC accounting, training, fixed-point
emulation and evaluation.
"""

__version__ = "0.1.0"
