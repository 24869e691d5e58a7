"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration, or data that does not match a model/dataset spec."""


class ArtifactFormatError(ValueError):
    """A saved artifact is missing a field or cannot be parsed.

    ``field`` names the offending entry so callers can report it.
    """

    def __init__(self, field, message=None):
        self.field = field
        super().__init__(message or f"artifact field {field!r} is missing or malformed")


class NumericError(FloatingPointError):
    """A loss or model output became non-finite."""
