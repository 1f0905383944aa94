"""Exception types raised across twistlab."""


class TwistError(Exception):
    """Base class for all library errors."""


class InvalidInputError(TwistError, ValueError):
    """An argument violates an operation's preconditions."""


class FormatError(TwistError):
    """A data file could not be parsed.

    ``offset`` is the byte position at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class GenerationError(TwistError):
    """Synthetic data generation could not satisfy its constraints."""


class ChecksumError(TwistError):
    """A checkpoint's checksum trailer does not match its payload."""


class IncompatibleVersionError(TwistError):
    def __init__(self, found: int, expected: int):
        super().__init__(
            f"checkpoint format version {found} is incompatible with supported version {expected}"
        )
        self.found = found
        self.expected = expected


class TrainingDivergedError(TwistError):
    """Raised when a loss or gradient becomes non-finite during training.

    ``diagnostics`` holds statistics of the last batch for post-mortem use.
    """

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class GradientCheckError(TwistError):
    """Finite-difference probing produced a non-finite loss."""


class ConfigError(TwistError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
