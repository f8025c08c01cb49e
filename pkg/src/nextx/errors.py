"""Exception hierarchy shared across the package."""


class NextXError(Exception):
    """Base class for all package-specific errors."""


class LayoutError(NextXError):
    """Entity layout construction or shape-compatibility failure."""


class ScheduleError(NextXError):
    """Invalid scale schedule request."""


class MaskError(NextXError):
    """Attention mask construction failure (bad spans)."""


class DomainError(NextXError):
    """Argument outside its valid domain (times, labels, step counts)."""


class CodecError(NextXError):
    """Patchify codec shape-divisibility failure."""


class ConfigError(NextXError):
    """Malformed run-configuration file or inconsistent config values."""


class TrainingError(NextXError):
    """Non-finite loss or diverging optimization."""
