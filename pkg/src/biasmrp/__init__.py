"""Bias-corrected, spatially structured multilevel regression and
post-stratification for opinion estimates from social-media samples."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .errors import DataValidationError, NonFiniteError, NumericalError

__all__ = ["DataValidationError", "NonFiniteError", "NumericalError", "__version__"]
