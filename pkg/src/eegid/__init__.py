"""Person recognition from multichannel time-series signals.

Subspace embedding systems (i-vector, x-vector and their fusion) over
per-channel PSD features, with a UBM-GMM baseline, evaluation protocols,
and a synthetic corpus generator for desk-scale verification.
"""

__version__ = "0.1.0"

from .errors import ArtifactError, DivergenceError, ValidationError

__all__ = ["ArtifactError", "DivergenceError", "ValidationError", "__version__"]
