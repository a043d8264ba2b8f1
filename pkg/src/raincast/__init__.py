"""Two-stage ensemble precipitation forecasting at kilometer scale.

A deterministic 3-D shifted-window transformer predicts the mesoscale mean
precipitation from coarse atmospheric states; a conditional latent diffusion
model samples the fine-scale residual. Members are the mean plus sampled
residuals, verified with categorical scores, rank histograms, and CDFs.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigurationError,
    GridPackError,
    NumericError,
    RaincastError,
    ValidationError,
)
from .grid import (
    AtmosphericState,
    GridField,
    GridSpec,
    NormalizationStats,
    ResidualField,
)

__all__ = [
    "AtmosphericState",
    "ConfigurationError",
    "GridField",
    "GridPackError",
    "GridSpec",
    "NormalizationStats",
    "NumericError",
    "RaincastError",
    "ResidualField",
    "ValidationError",
    "__version__",
]
