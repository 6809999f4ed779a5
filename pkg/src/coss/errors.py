"""Package-wide exception types, chiefly for binary file validation."""


class CossError(Exception):
    """Base for all package-specific errors."""


class BadMagicError(CossError):
    """File does not start with the expected magic bytes."""


class BadVersionError(CossError):
    """File magic is right but the format version is unsupported."""


class TruncatedFileError(CossError):
    """File ended before the declared payload was complete."""


class FormatError(CossError):
    """Structurally malformed file content (bad tags, trailing bytes, ...)."""


class ConfigError(CossError):
    """Invalid or inconsistent run configuration."""
