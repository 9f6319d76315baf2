"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class DPMPBError(Exception):
    exit_code = 1


class ConfigError(DPMPBError):
    """Invalid configuration, dimension mismatch or unsupported option."""

    exit_code = 2


class UnsupportedStructureError(ConfigError):
    """Operation requires a different model structure (STM vs CTM)."""


class DataError(DPMPBError):
    exit_code = 3


class BundleLoadError(DataError):
    """Model file is malformed; ``field`` names the offending key."""

    def __init__(self, field, message=None):
        self.field = field
        super().__init__(message or f"{field} absent")


class ModelUnusableError(DPMPBError):
    exit_code = 4


class NumericalError(DPMPBError):
    exit_code = 5
