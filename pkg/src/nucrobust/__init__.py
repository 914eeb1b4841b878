"""Robustness evaluation for nuclear instance segmentation under color and codec shifts."""
from .core import (CLASS_NAMES, NUM_CLASSES, Bundle, BundleIOError, LabelledPatch,
                   NucRobustError, NumericalError, ValidationError, validate_patch)

__version__ = "0.1.0"

__all__ = ["CLASS_NAMES", "NUM_CLASSES", "Bundle", "BundleIOError", "LabelledPatch",
           "NucRobustError", "NumericalError", "ValidationError", "validate_patch",
           "__version__"]
