"""Exception types shared across the package.

Every domain failure derives from :class:`AvatarError`; the CLI maps those to
exit code 1 and everything else (usage problems) to exit code 2.
"""


class AvatarError(Exception):
    """Base class for domain errors."""


class ConfigError(AvatarError, ValueError):
    """A configuration object violates one of its invariants."""


class FormatError(AvatarError):
    """A file or directory does not follow the expected layout."""


class IntegrityError(AvatarError):
    """Data is present but internally inconsistent."""


class ShapeError(AvatarError, ValueError):
    """Tensor or raster shapes do not match what an operation needs."""


class CorruptionError(FormatError):
    """Stored content hash does not match the stored bytes."""


class DegenerateInputError(AvatarError, ValueError):
    """Input is well formed but too small or singular for the computation."""


class NumericalError(AvatarError, ArithmeticError):
    """A computation produced non-finite values or left its valid domain."""
