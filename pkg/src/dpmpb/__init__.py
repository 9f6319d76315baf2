"""Recurrent predictive model with a parametric-bias vector: training, online
adaptation, model-predictive control and anomaly detection."""

from .errors import (BundleLoadError, ConfigError, DataError, DPMPBError, ModelUnusableError,
                     NumericalError, UnsupportedStructureError)
from .model import CTM, STM, ModelBundle, SignalSpec, load_bundle, save_bundle

__version__ = "0.1.0"

__all__ = ["BundleLoadError", "ConfigError", "DataError", "DPMPBError", "ModelUnusableError",
           "NumericalError", "UnsupportedStructureError", "CTM", "STM", "ModelBundle", "SignalSpec",
           "load_bundle", "save_bundle", "__version__"]
