"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called with arguments violating its contract."""


class InputError(ValueError):
    """Input data is malformed (non-finite values, empty sequences, ...)."""


class FormatError(ValueError):
    """A binary or text artifact on disk does not match its declared format."""


class ConfigError(ValueError):
    """A configuration value is invalid or unknown."""


class ManifestError(ValueError):
    """A dataset manifest failed validation."""
