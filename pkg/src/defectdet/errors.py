"""Exception types shared across the toolkit."""


class DetectorError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DetectorError):
    """Tensor or box dimensions do not line up."""


class ConfigError(DetectorError):
    """A static configuration value is invalid or inconsistent."""


class ContractError(DetectorError):
    """A documented precondition was violated by the caller."""


class NumericError(DetectorError):
    """Non-finite values or numerical divergence."""


class DatasetError(DetectorError):
    """Manifest, annotation, or raster files are missing or malformed."""


class CheckpointError(DetectorError):
    """A checkpoint file is unreadable, truncated, or from a wrong version."""
