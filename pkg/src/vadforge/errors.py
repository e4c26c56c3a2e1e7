"""Exception types shared across the toolkit."""


class VadforgeError(Exception):
    """Base class for all toolkit errors."""


class FormatError(VadforgeError):
    """A file or byte stream does not match its declared format."""


class UnsupportedFormatError(FormatError):
    """The format is recognized but not supported (e.g. compressed WAV)."""


class DataError(VadforgeError):
    """Input data is invalid, degenerate, or insufficient for the operation."""


class ShapeError(DataError):
    """Array dimensions do not match what the operation requires."""


class CoverageError(DataError):
    """Synthesis cannot cover the requested conditions with the material given."""


class ManifestError(DataError):
    """A manifest entry is malformed or references missing data."""


class DivergenceError(VadforgeError):
    """Training produced a non-finite loss."""


class ConfigError(VadforgeError):
    """Runtime configuration is inconsistent or incomplete."""
