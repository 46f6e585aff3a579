"""Exception types shared across the toolkit."""


class SemvoxError(Exception):
    """Base class for all semvox failures."""


class UserInputError(SemvoxError):
    """Bad flags, config values, or mismatched inputs.  CLI exit code 2."""


class ConfigError(UserInputError):
    """Malformed or inconsistent configuration / manifest."""


class PayloadMismatchError(UserInputError):
    """Frame payload does not match the semantic grid it targets."""


class FormatError(SemvoxError):
    """A binary or text artifact violates its declared layout."""


class OutOfRangeError(SemvoxError):
    """Voxel index falls outside the addressable coordinate range."""
