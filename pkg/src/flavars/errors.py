"""Exception hierarchy shared across the package."""


class FlavarsError(Exception):
    """Base class for every error raised deliberately by this package."""


class ConfigurationError(FlavarsError, ValueError):
    pass


class InvalidBatchError(FlavarsError, ValueError):
    pass


class TrainingError(FlavarsError, RuntimeError):
    """Raised when a loss component becomes non-finite."""

    def __init__(self, component: str, message: str | None = None):
        self.component = component
        super().__init__(message or f"non-finite value in loss component {component!r}")


class CheckpointError(FlavarsError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class FingerprintError(CheckpointError):
    pass


class DataError(FlavarsError, ValueError):
    pass


class CredentialError(FlavarsError):
    pass


class GroundingError(FlavarsError, ValueError):
    """Base for errors produced while reading a grounding response."""


class GroundingParseError(GroundingError):
    pass


class GroundingValidationError(GroundingError):
    """A bounding box failed validation.

    ``retained`` holds the improved caption with an empty grounding list so
    callers can keep the text while discarding the boxes.
    """

    def __init__(self, phrase: str, reason: str, retained=None):
        self.phrase = phrase
        self.reason = reason
        self.retained = retained
        super().__init__(f"invalid bbox for phrase {phrase!r}: {reason}")
