"""Residual-lifetime and re-entry prediction for decaying LEO objects.

The package turns raw orbital mean-element histories into re-entry epoch
predictions: records are pruned of outliers, each object's decay is reduced
to a fixed 25-point altitude/time trajectory, features are assembled into a
rank-3 tensor, and a GRU encoder-decoder trained with scheduled sampling
predicts the remaining trajectory down to the 80 km re-entry altitude.
"""

__version__ = "0.1.0"

from orbdecay.errors import ConfigError, InputError, NumericalError, OrbdecayError

__all__ = [
    "ConfigError",
    "InputError",
    "NumericalError",
    "OrbdecayError",
    "__version__",
]
