"""vibemil: ambulatory voice-monitoring classifiers.

Windowed neck-accelerometer features, stratified group cross-validation,
second-order gradient-boosted trees, an attention-pooled multiple-instance
CNN, and out-of-fold optimized ensembling, plus a synthetic cohort generator
and a command line front end.
"""

__version__ = "0.1.0"

from .data import CANONICAL_FEATURES, N_FEATURES  # noqa: F401
